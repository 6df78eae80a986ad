"""
Per-network training: Adam, horizontal-flip augmentation, random per-batch
loss selection, and a two-phase learning rate.

Phase 1 follows a cosine annealing curve from ``lr1``. The first time the
training loss and accuracy both stop fluctuating over a window of epochs
(the plateau trigger) the run switches, once, to a step-decayed ``lr2``.
"""
from __future__ import annotations

import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import model_zoo
from .data_io import DatasetBundle
from .errors import ConfigurationError, InputError, NonFiniteLossError
from .losses import BALANCED_POLICY, LossPolicy, ce_loss, class_weights
from .model_zoo import NetworkState


@dataclass
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 30
    lr1: float = 3e-4
    lr_min: float = 0.0
    cosine_period: int | None = None  # None: max_epochs
    lr2: float = 1e-5
    step_gamma: float = 0.9
    step_interval: int = 5
    plateau_window: int = 5
    plateau_loss_tol: float = 0.01
    plateau_acc_tol: float = 0.005
    stop_on_plateau: bool = False
    flip_prob: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_policy: tuple[tuple[str, float], ...] = BALANCED_POLICY
    lsr_epsilon: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.lr1 > self.lr2 > 0:
            raise ConfigurationError(f"need lr1 > lr2 > 0, got lr1={self.lr1}, lr2={self.lr2}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigurationError(f"flip probability {self.flip_prob} outside [0, 1]")
        if self.plateau_window < 2:
            raise ConfigurationError("plateau window must be at least 2 epochs")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigurationError("batch size must be >= 1 and max epochs >= 0")
        if self.step_interval <= 0 or not 0 < self.step_gamma <= 1:
            raise ConfigurationError("step_lr needs interval > 0 and gamma in (0, 1]")
        if self.cosine_period is not None and self.cosine_period <= 0:
            raise ConfigurationError("cosine period must be positive")

    @property
    def period(self) -> int:
        return self.cosine_period or max(self.max_epochs, 1)


@dataclass
class EpochRecord:
    epoch: int
    loss: float  # mean of the selected (optimized) batch losses
    monitor_loss: float  # mean unweighted cross entropy, used by the plateau trigger
    accuracy: float
    lr: float
    phase: int
    loss_kinds: dict[str, int]


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    switch_epoch: int | None = None
    stopped_on_plateau: bool = False

    def __len__(self) -> int:
        return len(self.epochs)


# ---------------------------------------------------------------------------
# Schedules and the plateau trigger
# ---------------------------------------------------------------------------

def cosine_lr(t: float, period: float, lr_max: float, lr_min: float = 0.0) -> float:
    if period <= 0:
        raise ConfigurationError("cosine period must be positive")
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * t / period))


def step_lr(epoch: int, base: float, gamma: float, interval: int) -> float:
    if interval <= 0:
        raise ConfigurationError("step interval must be positive")
    return base * gamma ** (epoch // interval)


def plateau_reached(losses, accuracies, window: int, loss_tol: float, acc_tol: float) -> bool:
    """True iff over the last ``window`` epochs both ranges (max - min) are below tolerance."""
    if len(losses) < window or len(accuracies) < window:
        return False
    recent_loss = np.asarray(losses[-window:], dtype=np.float64)
    recent_acc = np.asarray(accuracies[-window:], dtype=np.float64)
    return bool(np.ptp(recent_loss) < loss_tol and np.ptp(recent_acc) < acc_tol)


# ---------------------------------------------------------------------------
# Optimizer and augmentation
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1 - b1 ** self.t
        corr2 = 1 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)).astype(p.dtype, copy=False)


def hflip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1]


def random_flip(images: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    mask = rng.random(len(images)) < prob
    if not mask.any():
        return images
    out = images.copy()
    out[mask] = hflip(images[mask])
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def make_policy(cfg: TrainConfig, data: DatasetBundle, seed: int) -> LossPolicy:
    kinds = [k for k, _ in cfg.loss_policy]
    weights = class_weights(data.counts) if "WCE" in kinds else None
    return LossPolicy(tuple(cfg.loss_policy), epsilon=cfg.lsr_epsilon, weights=weights, seed=seed)


def train(state: NetworkState, data: DatasetBundle, cfg: TrainConfig) -> TrainReport:
    """Train ``state`` in place and return the per-epoch report."""
    if tuple(data.image_shape) != tuple(state.spec.input_shape):
        raise ConfigurationError(f"data images {data.image_shape} do not match network input {state.spec.input_shape}")
    if data.classes != state.spec.classes:
        raise ConfigurationError(f"data has {data.classes} classes, network outputs {state.spec.classes}")
    report = TrainReport()
    if cfg.max_epochs == 0:
        return report
    if len(data) == 0:
        raise InputError("cannot train on an empty dataset")

    # data order/flips and loss selection use separate streams
    data_seq, loss_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    data_rng = np.random.default_rng(data_seq)
    policy = make_policy(cfg, data, int(loss_seq.generate_state(1)[0]))
    opt = Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    batch = min(cfg.batch_size, len(data))
    dtype = next(iter(state.params.values())).dtype
    images = data.images.astype(dtype, copy=False)
    labels = data.labels
    n = len(data)

    losses: list[float] = []
    accs: list[float] = []
    phase = 1
    switch_epoch = None
    for epoch in range(cfg.max_epochs):
        if phase == 1:
            lr = cosine_lr(min(epoch, cfg.period), cfg.period, cfg.lr1, cfg.lr_min)
        else:
            lr = step_lr(epoch - switch_epoch, cfg.lr2, cfg.step_gamma, cfg.step_interval)
        order = data_rng.permutation(n)
        kinds: Counter[str] = Counter()
        loss_sum = monitor_sum = 0.0
        correct = 0
        n_batches = 0
        for b, start in enumerate(range(0, n, batch)):
            idx = order[start:start + batch]
            x = random_flip(images[idx], cfg.flip_prob, data_rng)
            y = labels[idx]
            kind = policy.pick()
            logits, cache = model_zoo.forward(state, x, return_cache=True)
            loss, dlogits = policy.loss(kind, logits, y)
            if not math.isfinite(loss):
                raise NonFiniteLossError(state.epoch + epoch, b, kind, loss)
            grads = model_zoo.backward(state, cache, dlogits)
            opt.step(state.params, grads, lr)
            kinds[kind] += 1
            loss_sum += loss * len(idx)
            monitor_sum += ce_loss(logits, y)[0] * len(idx)
            correct += int((logits.argmax(axis=1) == y).sum())
            n_batches += 1
        rec = EpochRecord(
            epoch=state.epoch + epoch,
            loss=loss_sum / n,
            monitor_loss=monitor_sum / n,
            accuracy=correct / n,
            lr=lr,
            phase=phase,
            loss_kinds={k: kinds[k] for k in policy.kinds},
        )
        report.epochs.append(rec)
        state.loss_history.append(rec.monitor_loss)
        losses.append(rec.monitor_loss)
        accs.append(rec.accuracy)

        if phase == 1:
            if plateau_reached(losses, accs, cfg.plateau_window, cfg.plateau_loss_tol, cfg.plateau_acc_tol):
                phase = 2
                switch_epoch = epoch + 1
                report.switch_epoch = state.epoch + switch_epoch
                state.well_trained = True
        elif cfg.stop_on_plateau:
            since = epoch + 1 - switch_epoch
            if since >= cfg.plateau_window and plateau_reached(
                    losses, accs, cfg.plateau_window, cfg.plateau_loss_tol, cfg.plateau_acc_tol):
                report.stopped_on_plateau = True
                break

    state.epoch += len(report.epochs)
    # running out of the epoch budget also counts as well trained
    state.well_trained = True
    w = min(cfg.plateau_window, len(losses))
    state.fitness = float(np.mean(losses[-w:]))
    return report


def _train_job(args):
    state, data, cfg = args
    report = train(state, data, cfg)
    return state, report


def train_many(states, data: DatasetBundle, cfgs, parallel: int = 1):
    """Train independent networks, optionally in worker processes.

    Returns ``(states, reports)`` in input order. Results do not depend on
    ``parallel`` because no state is shared between networks.
    """
    jobs = list(zip(states, [data] * len(states), cfgs))
    if parallel <= 1 or len(jobs) <= 1:
        results = [_train_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_train_job, jobs))
    return [r[0] for r in results], [r[1] for r in results]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray  # row = true class, column = predicted, rows normalized
    logits: np.ndarray | None = None
    predictions: np.ndarray | None = None


def confusion_matrix(predictions, labels, classes: int) -> np.ndarray:
    """Row-normalized confusion; a class with no samples gets an all-zero row."""
    counts = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(counts, (np.asarray(labels), np.asarray(predictions)), 1)
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros((classes, classes)), where=totals > 0)


def evaluate_predictions(predictions, labels, classes: int) -> EvalResult:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    conf = confusion_matrix(predictions, labels, classes)
    accuracy = int((predictions == labels).sum()) / len(labels)
    return EvalResult(accuracy, np.diag(conf).copy(), conf, predictions=predictions)


def evaluate(state: NetworkState, data: DatasetBundle) -> EvalResult:
    """Flip-free evaluation. Predictions are the argmax, lowest index on ties."""
    if len(data) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    logits = model_zoo.predict_logits(state, data.images)
    result = evaluate_predictions(logits.argmax(axis=1), data.labels, data.classes)
    result.logits = logits
    return result
