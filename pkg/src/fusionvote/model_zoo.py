"""
Toy-scale classification backbone ("MiniCNN") and the region-fusion first layer.

A :class:`NetworkSpec` is a flat list of layer descriptors. The first
convolution may be an ``fa_conv``: a main convolution plus one branch
convolution per crop region whose feature map is added, scaled by the
region weight, into the spatial window of the main output that lines up
with the crop.

Parameters live in :class:`NetworkState.params` keyed ``<layer>.<param>``,
e.g. ``fa_conv0.weight`` or ``fa_conv0.branch1.bias``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn_core as nn
from .errors import ConfigurationError

LAYER_ARITY = {
    "conv": 5,  # in, out, kernel, stride, padding
    "fa_conv": 5,
    "dense": 2,  # in, out
    "relu": 0,
    "maxpool2": 0,
    "flatten": 0,
    "gap": 0,
    "attention": 0,  # placeholder, identity
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    args: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in LAYER_ARITY:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if len(self.args) != LAYER_ARITY[self.kind]:
            raise ConfigurationError(
                f"layer {self.kind} takes {LAYER_ARITY[self.kind]} arguments, got {self.args}"
            )

    def render(self) -> str:
        if not self.args:
            return self.kind
        return f"{self.kind}({','.join(str(a) for a in self.args)})"

    @classmethod
    def parse(cls, text: str) -> "LayerSpec":
        text = text.strip()
        if "(" not in text:
            return cls(text)
        if not text.endswith(")"):
            raise ConfigurationError(f"malformed layer descriptor {text!r}")
        kind, _, rest = text[:-1].partition("(")
        try:
            args = tuple(int(a) for a in rest.split(",") if a.strip())
        except ValueError as exc:
            raise ConfigurationError(f"malformed layer descriptor {text!r}") from exc
        return cls(kind.strip(), args)


@dataclass(frozen=True)
class Region:
    """Crop window in input pixels: top-left corner plus extent."""

    row: int
    col: int
    height: int
    width: int

    def render(self) -> str:
        return f"{self.row},{self.col},{self.height},{self.width}"


@dataclass(frozen=True)
class FAConfig:
    regions: tuple[Region, ...] = ()
    weights: tuple[float, ...] = ()

    def __post_init__(self):
        if len(self.regions) != len(self.weights):
            raise ConfigurationError("FA needs exactly one fusion weight per region")
        if not all(math.isfinite(w) for w in self.weights):
            raise ConfigurationError(f"FA fusion weights must be finite, got {self.weights}")


def default_fa(height: int, width: int, weight: float = 0.3) -> FAConfig:
    """Upper-left quarter, upper-right quarter and lower-central half."""
    h2, w2, w4 = height // 2, width // 2, width // 4
    return FAConfig(
        regions=(
            Region(0, 0, h2, w2),
            Region(0, w2, h2, width - w2),
            Region(h2, w4, height - h2, w2),
        ),
        weights=(weight,) * 3,
    )


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, int, int]
    classes: int
    layers: tuple[LayerSpec, ...]
    fa: FAConfig = FAConfig()

    def layer_names(self) -> list[str]:
        return [f"{layer.kind}{i}" for i, layer in enumerate(self.layers)]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Walk the layers, checking that shapes compose; return every parameter shape."""
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError(f"input shape must be (channels, H, W), got {self.input_shape}")
        if self.classes < 2:
            raise ConfigurationError("need at least two classes")
        shapes: dict[str, tuple[int, ...]] = {}
        cur: tuple[int, ...] = tuple(self.input_shape)
        for name, layer in zip(self.layer_names(), self.layers):
            kind, a = layer.kind, layer.args
            if kind in ("conv", "fa_conv"):
                cin, cout, k, stride, pad = a
                if len(cur) != 3 or cur[0] != cin:
                    raise ConfigurationError(f"{name}: expects {cin} input channels, incoming shape {cur}")
                if min(cout, k, stride) < 1 or pad < 0:
                    raise ConfigurationError(f"{name}: invalid arguments {a}")
                Ho = nn.conv_output_size(cur[1], k, stride, pad)
                Wo = nn.conv_output_size(cur[2], k, stride, pad)
                if Ho < 1 or Wo < 1:
                    raise ConfigurationError(f"{name}: kernel {k} too large for input {cur}")
                shapes[f"{name}.weight"] = (cout, cin, k, k)
                shapes[f"{name}.bias"] = (cout,)
                if kind == "fa_conv":
                    for r, region in enumerate(self.fa.regions):
                        _region_window(region, cur[1:], (Ho, Wo), k, stride, pad)
                        shapes[f"{name}.branch{r}.weight"] = (cout, cin, k, k)
                        shapes[f"{name}.branch{r}.bias"] = (cout,)
                cur = (cout, Ho, Wo)
            elif kind == "dense":
                fin, fout = a
                if len(cur) != 1 or cur[0] != fin:
                    raise ConfigurationError(f"{name}: expects {fin} input features, incoming shape {cur}")
                if fout < 1:
                    raise ConfigurationError(f"{name}: invalid output size {fout}")
                shapes[f"{name}.weight"] = (fout, fin)
                shapes[f"{name}.bias"] = (fout,)
                cur = (fout,)
            elif kind == "maxpool2":
                if len(cur) != 3 or cur[1] < 2 or cur[2] < 2:
                    raise ConfigurationError(f"{name}: cannot pool shape {cur}")
                cur = (cur[0], cur[1] // 2, cur[2] // 2)
            elif kind in ("flatten", "gap"):
                if len(cur) != 3:
                    raise ConfigurationError(f"{name}: needs a feature map, incoming shape {cur}")
                cur = (int(np.prod(cur)),) if kind == "flatten" else (cur[0],)
            # relu and attention keep the shape
        if cur != (self.classes,):
            raise ConfigurationError(f"network output shape {cur} != ({self.classes},)")
        return shapes

    def validate(self) -> None:
        self.param_shapes()

    # config text rendering -------------------------------------------------
    def to_config(self) -> dict[str, str]:
        return {
            "model.input": ",".join(str(v) for v in self.input_shape),
            "model.classes": str(self.classes),
            "model.layers": " ".join(layer.render() for layer in self.layers),
            "model.fa.regions": " ".join(r.render() for r in self.fa.regions),
            "model.fa.weights": " ".join(repr(float(w)) for w in self.fa.weights),
        }

    @classmethod
    def from_config(cls, cfg: dict[str, str]) -> "NetworkSpec":
        try:
            input_shape = tuple(int(v) for v in cfg["model.input"].split(","))
            classes = int(cfg["model.classes"])
            layers = tuple(LayerSpec.parse(t) for t in cfg["model.layers"].split())
            regions = tuple(
                Region(*(int(v) for v in t.split(","))) for t in cfg.get("model.fa.regions", "").split()
            )
            weights = tuple(float(v) for v in cfg.get("model.fa.weights", "").split())
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigurationError(f"malformed model configuration: {exc}") from exc
        return cls(input_shape, classes, layers, FAConfig(regions, weights))  # type: ignore[arg-type]


def _region_window(region: Region, in_hw, out_hw, k: int, stride: int, pad: int):
    """Output-space window (row, col, h, w) of a crop branch; rejects crops that don't tile."""
    H, W = in_hw
    if region.row < 0 or region.col < 0 or region.height < 1 or region.width < 1:
        raise ConfigurationError(f"invalid region {region}")
    if region.row + region.height > H or region.col + region.width > W:
        raise ConfigurationError(f"region {region} lies outside the {H}x{W} input")
    if region.row % stride or region.col % stride:
        raise ConfigurationError(f"region {region} is not aligned to stride {stride}")
    h = nn.conv_output_size(region.height, k, stride, pad)
    w = nn.conv_output_size(region.width, k, stride, pad)
    r0, c0 = region.row // stride, region.col // stride
    if h < 1 or w < 1 or r0 + h > out_hw[0] or c0 + w > out_hw[1]:
        raise ConfigurationError(f"region {region} does not map inside the {out_hw} output map")
    return r0, c0, h, w


def minicnn_spec(
    input_shape=(1, 16, 16),
    classes: int = 5,
    channels=(8, 16, 32),
    hidden: int = 96,
    fa: FAConfig | None = None,
) -> NetworkSpec:
    """Three conv stages (3x3, same padding) and a two-layer dense head.

    With the defaults this is ~55k parameters. ``fa=None`` installs the
    default three-region fusion layer; pass ``FAConfig()`` for a plain first conv.
    """
    c, h, w = input_shape
    if fa is None:
        fa = default_fa(h, w)
    c1, c2, c3 = channels
    layers = [
        LayerSpec("fa_conv", (c, c1, 3, 1, 1)), LayerSpec("relu"), LayerSpec("maxpool2"),
        LayerSpec("conv", (c1, c2, 3, 1, 1)), LayerSpec("relu"), LayerSpec("maxpool2"),
        LayerSpec("conv", (c2, c3, 3, 1, 1)), LayerSpec("relu"),
        LayerSpec("flatten"),
        LayerSpec("dense", (c3 * (h // 4) * (w // 4), hidden)), LayerSpec("relu"),
        LayerSpec("dense", (hidden, classes)),
    ]
    return NetworkSpec(tuple(input_shape), classes, tuple(layers), fa)


@dataclass
class NetworkState:
    """Mutable parameters of one network plus its training bookkeeping."""

    spec: NetworkSpec
    params: dict[str, np.ndarray]
    seed: int = 0
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    well_trained: bool = False
    fitness: float | None = None

    def check(self) -> None:
        expected = self.spec.param_shapes()
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ConfigurationError(f"parameter keys disagree with spec (missing {missing}, extra {extra})")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigurationError(f"{name}: shape {self.params[name].shape} != spec {shape}")

    def copy(self) -> "NetworkState":
        return NetworkState(
            spec=self.spec,
            params={k: v.copy() for k, v in self.params.items()},
            seed=self.seed,
            epoch=self.epoch,
            loss_history=list(self.loss_history),
            well_trained=self.well_trained,
            fitness=self.fitness,
        )

    def num_parameters(self) -> int:
        return sum(int(v.size) for v in self.params.values())


def build(spec: NetworkSpec, seed: int) -> NetworkState:
    """Fresh parameters: weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)), biases zero."""
    shapes = spec.param_shapes()
    rng = np.random.default_rng(seed)
    dtype = nn.default_dtype()
    params: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = math.sqrt(6.0 / int(np.prod(shape[1:])))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return NetworkState(spec=spec, params=params, seed=seed)


# ---------------------------------------------------------------------------
# Region-fusion convolution
# ---------------------------------------------------------------------------

def fa_forward(image, main, branches, weights, regions, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Main convolution plus weighted, spatially aligned crop-branch feature maps.

    ``main`` and each entry of ``branches`` are ``(kernels, bias)`` pairs; the
    branch for region k only sees ``image`` cropped to that region.
    """
    x, squeeze = nn._batched(np.asarray(image), 4)
    w, b = main
    if len(branches) != len(regions) or len(weights) != len(regions):
        raise ConfigurationError("need one branch and one weight per region")
    out = nn.conv2d_forward(x, w, b, stride, padding)
    for (bw, bb), lam, region in zip(branches, weights, regions):
        if np.shape(bw)[0] != np.shape(w)[0]:
            raise ConfigurationError("branch and main kernels must have the same output channels")
        r0, c0, h, wd = _region_window(region, x.shape[2:], out.shape[2:], np.shape(bw)[2], stride, padding)
        crop = x[:, :, region.row:region.row + region.height, region.col:region.col + region.width]
        out[:, :, r0:r0 + h, c0:c0 + wd] += lam * nn.conv2d_forward(crop, bw, bb, stride, padding)
    return out[0] if squeeze else out


def fa_backward(image, main_kernels, branch_kernels, weights, regions, upstream,
                stride: int = 1, padding: int = 0,
                need_input_grad: bool = True) -> tuple[nn.LayerGrad, list[nn.LayerGrad]]:
    x, squeeze = nn._batched(np.asarray(image), 4)
    g, _ = nn._batched(np.asarray(upstream), 4)
    main_grad = nn.conv2d_backward(x, main_kernels, g, stride, padding, need_input_grad)
    dx = main_grad.input
    branch_grads = []
    for bw, lam, region in zip(branch_kernels, weights, regions):
        r0, c0, h, wd = _region_window(region, x.shape[2:], g.shape[2:], bw.shape[2], stride, padding)
        crop = x[:, :, region.row:region.row + region.height, region.col:region.col + region.width]
        bg = nn.conv2d_backward(crop, bw, lam * g[:, :, r0:r0 + h, c0:c0 + wd], stride, padding,
                                need_input_grad)
        if need_input_grad:
            dx[:, :, region.row:region.row + region.height, region.col:region.col + region.width] += bg.input
        branch_grads.append(bg)
    if squeeze and need_input_grad:
        main_grad.input = dx[0]
    return main_grad, branch_grads


# ---------------------------------------------------------------------------
# Whole-network passes
# ---------------------------------------------------------------------------

def forward(state: NetworkState, batch, return_cache: bool = False):
    """Logits [B, C] for a batch [B, channels, H, W].

    With ``return_cache=True`` also returns the per-layer inputs that
    :func:`backward` needs.
    """
    spec, p = state.spec, state.params
    x = np.asarray(batch)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ConfigurationError(f"batch shape {x.shape} does not match input {spec.input_shape}")
    x = x.astype(p[next(iter(p))].dtype, copy=False) if p else x
    cache = []
    for name, layer in zip(spec.layer_names(), spec.layers):
        cache.append(x)
        kind, a = layer.kind, layer.args
        if kind == "conv":
            x = nn.conv2d_forward(x, p[f"{name}.weight"], p[f"{name}.bias"], a[3], a[4])
        elif kind == "fa_conv":
            branches = [(p[f"{name}.branch{r}.weight"], p[f"{name}.branch{r}.bias"])
                        for r in range(len(spec.fa.regions))]
            x = fa_forward(x, (p[f"{name}.weight"], p[f"{name}.bias"]), branches,
                           spec.fa.weights, spec.fa.regions, a[3], a[4])
        elif kind == "dense":
            x = nn.dense_forward(x, p[f"{name}.weight"], p[f"{name}.bias"])
        elif kind == "relu":
            x = nn.relu_forward(x)
        elif kind == "maxpool2":
            x = nn.maxpool2x2_forward(x)
        elif kind == "flatten":
            x = nn.flatten(x)
        elif kind == "gap":
            x = nn.global_avg_pool(x)
    return (x, cache) if return_cache else x


def backward(state: NetworkState, cache: list, upstream,
             return_input_grad: bool = False):
    """Gradients for every parameter key, given d(loss)/d(logits).

    The input-image gradient is skipped unless ``return_input_grad`` is set,
    in which case ``(grads, d_input)`` is returned.
    """
    spec, p = state.spec, state.params
    g = np.asarray(upstream)
    grads: dict[str, np.ndarray] = {}
    for i, name, layer, x in reversed(list(zip(range(len(cache)), spec.layer_names(), spec.layers, cache))):
        kind, a = layer.kind, layer.args
        need_input = i > 0 or return_input_grad
        if kind == "conv":
            lg = nn.conv2d_backward(x, p[f"{name}.weight"], g, a[3], a[4], need_input)
        elif kind == "fa_conv":
            n_regions = len(spec.fa.regions)
            lg, blgs = fa_backward(x, p[f"{name}.weight"],
                                   [p[f"{name}.branch{r}.weight"] for r in range(n_regions)],
                                   spec.fa.weights, spec.fa.regions, g, a[3], a[4], need_input)
            for r, blg in enumerate(blgs):
                grads[f"{name}.branch{r}.weight"] = blg.params["weight"]
                grads[f"{name}.branch{r}.bias"] = blg.params["bias"]
        elif kind == "dense":
            lg = nn.dense_backward(x, p[f"{name}.weight"], g)
        elif kind == "relu":
            lg = nn.relu_backward(x, g)
        elif kind == "maxpool2":
            lg = nn.maxpool2x2_backward(x, g)
        elif kind == "flatten":
            lg = nn.flatten_backward(x, g)
        elif kind == "gap":
            lg = nn.global_avg_pool_backward(x, g)
        else:
            continue
        for pname, pg in lg.params.items():
            grads[f"{name}.{pname}"] = pg
        g = lg.input
    return (grads, g) if return_input_grad else grads


def predict_logits(state: NetworkState, images, batch_size: int = 500) -> np.ndarray:
    images = np.asarray(images)
    chunks = [forward(state, images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0, state.spec.classes))

