"""
Flat ``key = value`` run configuration.

Every key has a documented default (see :data:`DEFAULTS`); unknown keys
are rejected. Values stay strings until a typed view is requested, so
``parse(render(parse(text)))`` reproduces the same mapping.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigurationError
from .fga import FGAConfig
from .losses import LOSS_KINDS, LossPolicy
from .model_zoo import FAConfig, NetworkSpec, Region, default_fa, minicnn_spec
from .trainer import TrainConfig

# key -> (default, description)
DEFAULTS: dict[str, tuple[str, str]] = {
    "model.input": ("1,16,16", "input shape channels,height,width"),
    "model.classes": ("5", "number of classes"),
    "model.layers": ("auto", "layer descriptors, or 'auto' for the default MiniCNN"),
    "model.fa.regions": ("auto", "crop regions row,col,height,width; 'auto' = three default regions; 'none'"),
    "model.fa.weights": ("0.3", "fusion weight per region (one value is broadcast)"),
    "train.batch_size": ("128", "mini-batch size (capped at the dataset size)"),
    "train.max_epochs": ("30", "epoch budget"),
    "train.lr1": ("0.0003", "phase-1 cosine annealing peak learning rate"),
    "train.lr_min": ("0.0", "phase-1 cosine floor"),
    "train.cosine_period": ("0", "cosine period in epochs; 0 = max_epochs"),
    "train.lr2": ("1e-05", "phase-2 step schedule base learning rate"),
    "train.step_gamma": ("0.9", "phase-2 decay factor"),
    "train.step_interval": ("5", "phase-2 epochs between decays"),
    "train.plateau_window": ("5", "epochs inspected by the plateau trigger"),
    "train.plateau_loss_tol": ("0.01", "maximum loss range for a plateau"),
    "train.plateau_acc_tol": ("0.005", "maximum accuracy range for a plateau"),
    "train.stop_on_plateau": ("false", "stop once phase 2 reaches a plateau"),
    "train.flip_prob": ("0.5", "horizontal flip probability"),
    "train.adam_beta1": ("0.9", "Adam first-moment decay"),
    "train.adam_beta2": ("0.999", "Adam second-moment decay"),
    "train.adam_eps": ("1e-08", "Adam denominator epsilon"),
    "train.seed": ("0", "base seed for initialization, data order and loss selection"),
    "loss.policy": ("LSR:0.8,CE:0.2", "per-batch loss selection probabilities (CE, WCE, LSR)"),
    "loss.epsilon": ("0.1", "label smoothing factor"),
    "fga.fusions": ("2", "fused children per generation"),
    "fga.parents": ("3", "parents per fused child"),
    "fga.fresh": ("2", "freshly initialized networks per generation"),
    "fga.tau": ("0.5", "selection temperature"),
    "fga.child_epochs": ("20", "retraining epoch cap for new networks"),
    "fga.seed": ("0", "seed for parent selection and child seeds"),
    "ensemble.strategy": ("t2v", "t2v, top1 or noi"),
    "ensemble.alpha": ("1.9", "T2V weight of a first place"),
    "ensemble.beta": ("1.0", "T2V weight of a second place"),
}

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


@dataclass
class RunConfig:
    values: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        unknown = sorted(set(self.values) - set(DEFAULTS))
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {', '.join(unknown)}")

    def __getitem__(self, key: str) -> str:
        if key not in DEFAULTS:
            raise ConfigurationError(f"unknown configuration key {key!r}")
        return self.values.get(key, DEFAULTS[key][0])

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigurationError(f"unknown configuration key {key!r}")
        self.values[key] = str(value)

    def resolved(self) -> dict[str, str]:
        return {k: self[k] for k in sorted(DEFAULTS)}

    # parsing and rendering -------------------------------------------------
    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        values: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            key = key.strip()
            if key in values:
                raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
            values[key] = value.strip()
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def render(self, resolved: bool = False) -> str:
        items = self.resolved() if resolved else {k: self.values[k] for k in sorted(self.values)}
        return "".join(f"{k} = {v}\n" for k, v in items.items())

    def validate(self) -> None:
        """Build every typed view once so malformed values fail early."""
        self.network_spec()
        self.train_config()
        self.fga_config()
        self.ensemble_params()

    # typed views -------------------------------------------------------------
    def _num(self, key: str, kind):
        try:
            return kind(self[key])
        except ValueError as exc:
            raise ConfigurationError(f"{key}: cannot parse {self[key]!r} as {kind.__name__}") from exc

    def _bool(self, key: str) -> bool:
        try:
            return _BOOL[self[key].lower()]
        except KeyError as exc:
            raise ConfigurationError(f"{key}: expected true/false, got {self[key]!r}") from exc

    def network_spec(self) -> NetworkSpec:
        try:
            input_shape = tuple(int(v) for v in self["model.input"].split(","))
        except ValueError as exc:
            raise ConfigurationError(f"model.input: malformed {self['model.input']!r}") from exc
        if len(input_shape) != 3:
            raise ConfigurationError("model.input needs channels,height,width")
        classes = self._num("model.classes", int)
        regions_text = self["model.fa.regions"].strip()
        try:
            weights = [float(w) for w in self["model.fa.weights"].split()]
        except ValueError as exc:
            raise ConfigurationError(f"model.fa.weights: malformed {self['model.fa.weights']!r}") from exc
        if regions_text == "auto":
            regions = default_fa(input_shape[1], input_shape[2]).regions
        elif regions_text in ("", "none"):
            regions = ()
        else:
            try:
                regions = tuple(Region(*(int(v) for v in t.split(","))) for t in regions_text.split())
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"model.fa.regions: malformed {regions_text!r}") from exc
        if len(weights) == 1:
            weights = weights * len(regions)
        elif not regions:
            weights = []
        fa = FAConfig(tuple(regions), tuple(weights))
        if self["model.layers"].strip() == "auto":
            spec = minicnn_spec(input_shape, classes, fa=fa)
        else:
            spec = NetworkSpec.from_config({
                "model.input": self["model.input"],
                "model.classes": str(classes),
                "model.layers": self["model.layers"],
            })
            spec = NetworkSpec(spec.input_shape, spec.classes, spec.layers, fa)
        spec.validate()
        return spec

    def policy_entries(self) -> tuple[tuple[str, float], ...]:
        entries = LossPolicy.parse_entries(self["loss.policy"])
        if not entries or any(k not in LOSS_KINDS for k, _ in entries):
            raise ConfigurationError(f"loss.policy: malformed {self['loss.policy']!r}")
        LossPolicy(entries, epsilon=self._num("loss.epsilon", float))  # validates probabilities
        return entries

    def train_config(self) -> TrainConfig:
        period = self._num("train.cosine_period", int)
        return TrainConfig(
            batch_size=self._num("train.batch_size", int),
            max_epochs=self._num("train.max_epochs", int),
            lr1=self._num("train.lr1", float),
            lr_min=self._num("train.lr_min", float),
            cosine_period=period or None,
            lr2=self._num("train.lr2", float),
            step_gamma=self._num("train.step_gamma", float),
            step_interval=self._num("train.step_interval", int),
            plateau_window=self._num("train.plateau_window", int),
            plateau_loss_tol=self._num("train.plateau_loss_tol", float),
            plateau_acc_tol=self._num("train.plateau_acc_tol", float),
            stop_on_plateau=self._bool("train.stop_on_plateau"),
            flip_prob=self._num("train.flip_prob", float),
            adam_beta1=self._num("train.adam_beta1", float),
            adam_beta2=self._num("train.adam_beta2", float),
            adam_eps=self._num("train.adam_eps", float),
            loss_policy=self.policy_entries(),
            lsr_epsilon=self._num("loss.epsilon", float),
            seed=self._num("train.seed", int),
        )

    def fga_config(self) -> FGAConfig:
        return FGAConfig(
            fusions=self._num("fga.fusions", int),
            parents=self._num("fga.parents", int),
            fresh=self._num("fga.fresh", int),
            tau=self._num("fga.tau", float),
            child_epochs=self._num("fga.child_epochs", int),
            seed=self._num("fga.seed", int),
        )

    def ensemble_params(self) -> tuple[str, float, float]:
        strategy = self["ensemble.strategy"]
        if strategy not in ("t2v", "top1", "noi"):
            raise ConfigurationError(f"ensemble.strategy: unknown strategy {strategy!r}")
        alpha = self._num("ensemble.alpha", float)
        beta = self._num("ensemble.beta", float)
        if not alpha >= beta > 0:
            raise ConfigurationError(f"ensemble weights need alpha >= beta > 0, got {alpha}, {beta}")
        return strategy, alpha, beta


def describe_defaults() -> str:
    return "".join(f"{k} = {v}    # {doc}\n" for k, (v, doc) in sorted(DEFAULTS.items()))
