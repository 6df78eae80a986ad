"""
Cross entropy, class-weighted cross entropy, label smoothing, and the
per-batch random loss selection policy.

All losses accept a single logit vector ``[C]`` or a batch ``[B, C]`` and
return ``(loss, d_loss/d_logits)``. Batched losses are the mean over
samples, so the gradient carries a ``1/B`` factor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputError
from .nn_core import log_softmax, softmax

LOSS_KINDS = ("CE", "WCE", "LSR")


def _prepare(logits, labels):
    z = np.asarray(logits)
    single = z.ndim == 1
    z2 = z[None] if single else z
    y = np.atleast_1d(np.asarray(labels))
    if z2.ndim != 2 or y.shape != (z2.shape[0],):
        raise InputError(f"logits {z.shape} and labels {np.shape(labels)} disagree")
    if not np.issubdtype(y.dtype, np.integer):
        raise InputError("labels must be integer class indices")
    C = z2.shape[1]
    if y.size and (y.min() < 0 or y.max() >= C):
        raise InputError(f"label out of range for {C} classes")
    return z2, y, single


def soft_cross_entropy(logits, targets):
    """Mean of ``-sum_i t_i log q_i`` over the batch, with its logit gradient."""
    z = np.asarray(logits)
    t = np.asarray(targets, dtype=z.dtype)
    logq = log_softmax(z)
    per_sample = -(t * logq).sum(axis=-1)
    grad = softmax(z) * t.sum(axis=-1, keepdims=True) - t
    if z.ndim == 1:
        return float(per_sample), grad
    B = z.shape[0]
    return float(per_sample.mean()), grad / B


def ce_loss(logits, label, weights=None):
    """Cross entropy ``-w_y log q_y``; unweighted when ``weights`` is None."""
    z, y, single = _prepare(logits, label)
    C = z.shape[1]
    targets = np.zeros_like(z)
    w = np.ones(len(y), dtype=z.dtype)
    if weights is not None:
        weights = np.asarray(weights, dtype=z.dtype)
        if weights.shape != (C,):
            raise InputError(f"expected {C} class weights, got shape {weights.shape}")
        w = weights[y]
    targets[np.arange(len(y)), y] = w
    loss, grad = soft_cross_entropy(z, targets)
    return loss, (grad[0] if single else grad)


def smoothed_targets(labels, classes: int, epsilon: float, dtype=np.float64) -> np.ndarray:
    """``1 - eps`` on the label and ``eps / (C - 1)`` on every other class."""
    if classes < 2:
        raise ConfigurationError("label smoothing needs at least two classes")
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigurationError(f"epsilon must lie in [0, 1], got {epsilon}")
    y = np.atleast_1d(np.asarray(labels))
    t = np.full((len(y), classes), epsilon / (classes - 1), dtype=dtype)
    t[np.arange(len(y)), y] = 1.0 - epsilon
    return t


def lsr_loss(logits, label, epsilon: float = 0.1):
    z, y, single = _prepare(logits, label)
    t = smoothed_targets(y, z.shape[1], epsilon, dtype=z.dtype)
    loss, grad = soft_cross_entropy(z, t)
    return loss, (grad[0] if single else grad)


def class_weights(counts) -> np.ndarray:
    """Inverse-frequency weights ``N / (C * n_c)``; balanced counts give all ones."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise InputError("counts must be a non-empty 1-D sequence")
    if np.any(counts <= 0):
        raise InputError(f"every class needs at least one sample, got counts {counts.tolist()}")
    return counts.sum() / (counts.size * counts)


@dataclass
class LossPolicy:
    """Per-batch random choice of one loss. Never a blend of losses."""

    entries: tuple[tuple[str, float], ...]
    epsilon: float = 0.1
    weights: np.ndarray | None = None
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not self.entries:
            raise ConfigurationError("loss policy has no entries")
        kinds = [k for k, _ in self.entries]
        probs = [p for _, p in self.entries]
        if any(k not in LOSS_KINDS for k in kinds):
            raise ConfigurationError(f"unknown loss kind in {kinds}; expected one of {LOSS_KINDS}")
        if len(set(kinds)) != len(kinds):
            raise ConfigurationError(f"duplicate loss kind in {kinds}")
        if any(p < 0 or not math.isfinite(p) for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigurationError(f"loss probabilities must be >= 0 and sum to 1, got {probs}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigurationError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        self.reset()

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(k for k, _ in self.entries)

    def reset(self, seed: int | None = None) -> None:
        if seed is not None:
            self.seed = seed
        self._rng = np.random.default_rng(self.seed)

    def pick(self) -> str:
        return pick_loss(self, self._rng)

    def loss(self, kind: str, logits, labels):
        if kind == "CE":
            return ce_loss(logits, labels)
        if kind == "WCE":
            if self.weights is None:
                raise ConfigurationError("WCE selected but the policy carries no class weights")
            return ce_loss(logits, labels, self.weights)
        if kind == "LSR":
            return lsr_loss(logits, labels, self.epsilon)
        raise ConfigurationError(f"unknown loss kind {kind!r}")

    def render(self) -> str:
        return ",".join(f"{k}:{p!r}" for k, p in self.entries)

    @staticmethod
    def parse_entries(text: str) -> tuple[tuple[str, float], ...]:
        entries = []
        for item in text.split(","):
            item = item.strip()
            if not item:
                continue
            kind, sep, prob = item.partition(":")
            if not sep:
                raise ConfigurationError(f"malformed loss policy entry {item!r}")
            try:
                entries.append((kind.strip().upper(), float(prob)))
            except ValueError as exc:
                raise ConfigurationError(f"malformed loss policy entry {item!r}") from exc
        return tuple(entries)


def pick_loss(policy: LossPolicy, rng: np.random.Generator) -> str:
    """Draw one loss kind with the policy's probabilities."""
    if not policy.entries:
        raise ConfigurationError("loss policy has no entries")
    probs = np.array([p for _, p in policy.entries], dtype=np.float64)
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return policy.entries[min(idx, len(policy.entries) - 1)][0]


BALANCED_POLICY = (("LSR", 0.8), ("CE", 0.2))
SKEWED_POLICY = (("WCE", 0.8), ("LSR", 0.2))
