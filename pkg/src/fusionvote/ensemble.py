"""
Decision-level ensembles over networks that share one label space.

``outputs`` arguments are stacks of logits with the network axis first:
``[M, C]`` for one sample or ``[M, N, C]`` for a dataset. Every argmax
breaks ties towards the lowest class index.

Top-two voting (T2V) gives ``alpha`` votes to each network's first-ranked
class and ``beta`` to its second; the vote sums decide. Rank scores put
``C - 1`` on the largest logit, which is the encoding under which the
closed-form vote formula reproduces the case-by-case definition.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError
from .nn_core import softmax

DEFAULT_ALPHA = 1.9
DEFAULT_BETA = 1.0
STRATEGIES = ("t2v", "top1", "noi")


@dataclass
class EnsembleDecision:
    outputs: np.ndarray  # [M, C] or [M, N, C]
    aggregate: np.ndarray  # [C] or [N, C]
    predicted: np.ndarray | int
    strategy: str
    alpha: float | None = None
    beta: float | None = None


def _stack(outputs) -> np.ndarray:
    try:
        out = np.asarray(outputs, dtype=np.float64)
    except ValueError as exc:
        raise InputError("networks disagree on the number of classes") from exc
    if out.ndim < 2 or out.shape[0] < 1:
        raise InputError(f"need a stack of network outputs [M, ..., C], got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise InputError("network outputs must be finite")
    return out


def _argmax(aggregate: np.ndarray):
    pred = aggregate.argmax(axis=-1)
    return int(pred) if pred.ndim == 0 else pred


def rank_vector(logits) -> np.ndarray:
    """Rank score per class: C-1 for the largest logit down to 0 for the smallest.

    Equal logits rank the lower class index higher.
    """
    z = np.asarray(logits)
    C = z.shape[-1]
    order = np.argsort(-z, axis=-1, kind="stable")
    scores = np.broadcast_to(np.arange(C - 1, -1, -1), z.shape).copy()
    ranks = np.empty(z.shape, dtype=np.int64)
    np.put_along_axis(ranks, order, scores, axis=-1)
    return ranks


def _check_ranks(S) -> np.ndarray:
    S = np.asarray(S)
    C = S.shape[-1]
    if C < 2:
        raise ConfigurationError("top-two voting needs at least two classes")
    return S


def t2v_votes_direct(S, alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA) -> np.ndarray:
    """alpha on the top class, beta on the runner-up, zero elsewhere."""
    S = _check_ranks(S)
    C = S.shape[-1]
    return np.where(S == C - 1, alpha, np.where(S == C - 2, beta, 0.0))


def t2v_votes_fast(S, alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA) -> np.ndarray:
    """Branch-free form: (alpha-2beta)*max(S+2-C, 0) + beta*max(S+3-C, 0)."""
    S = _check_ranks(S)
    C = S.shape[-1]
    return (alpha - 2 * beta) * np.maximum(S + 2 - C, 0) + beta * np.maximum(S + 3 - C, 0)


def t2v_label_vector(S, alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA,
                     fast: bool = True) -> np.ndarray:
    return t2v_votes_fast(S, alpha, beta) if fast else t2v_votes_direct(S, alpha, beta)


def t2v(outputs, alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA) -> EnsembleDecision:
    """Sum of the networks' top-two vote vectors. No normalization of logits."""
    out = _stack(outputs)
    aggregate = t2v_votes_fast(rank_vector(out), alpha, beta).sum(axis=0)
    return EnsembleDecision(out, aggregate, _argmax(aggregate), "t2v", alpha, beta)


def top1_vote(outputs) -> EnsembleDecision:
    """Bagging-style voting: one vote per network for its argmax class."""
    out = _stack(outputs)
    C = out.shape[-1]
    votes = np.eye(C)[out.argmax(axis=-1)]
    aggregate = votes.sum(axis=0)
    return EnsembleDecision(out, aggregate, _argmax(aggregate), "top1")


def noi(outputs) -> EnsembleDecision:
    """Sum of softmax-normalized outputs."""
    out = _stack(outputs)
    aggregate = softmax(out, axis=-1).sum(axis=0)
    return EnsembleDecision(out, aggregate, _argmax(aggregate), "noi")


def combine(strategy: str, outputs, alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA) -> EnsembleDecision:
    if strategy == "t2v":
        return t2v(outputs, alpha, beta)
    if strategy == "top1":
        return top1_vote(outputs)
    if strategy == "noi":
        return noi(outputs)
    raise ConfigurationError(f"unknown ensemble strategy {strategy!r}; expected one of {STRATEGIES}")


def label_positions(logits, labels) -> np.ndarray:
    """1-based position of each true label in its sample's descending ranking."""
    z = np.asarray(logits)
    y = np.asarray(labels)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise InputError(f"logits {z.shape} and labels {y.shape} disagree")
    C = z.shape[1]
    if y.size and (y.min() < 0 or y.max() >= C):
        raise InputError(f"label out of range for {C} classes")
    ranks = rank_vector(z)
    return C - ranks[np.arange(len(y)), y]


def rank_distribution(logits, labels) -> np.ndarray:
    """Fraction of samples whose true label lands at rank 1, 2, ..., C."""
    z = np.asarray(logits)
    if z.ndim != 2 or z.shape[0] == 0:
        raise InputError("rank distribution needs a non-empty [N, C] set of logits")
    positions = label_positions(z, labels)
    return np.bincount(positions - 1, minlength=z.shape[1]) / len(positions)
