"""
Minimal differentiable tensor engine.

Tensors are plain numpy arrays in channels-first, row-major layout
(``[B, C, H, W]`` for images, ``[m, n, s1, s2]`` for convolution kernels).
Every layer is a pair of pure functions: ``*_forward`` computes the output
and ``*_backward`` takes the forward input plus the upstream gradient and
returns a :class:`LayerGrad`.

Precision
---------
Parameters and generated data use the engine default dtype, float32 unless
the ``FUSIONVOTE_FLOAT64`` environment variable is set or the code runs
inside :func:`float64_mode`. Operations never change the dtype of their
inputs, so gradient checks simply feed float64 arrays.
"""
from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigurationError

_default_dtype = np.dtype(np.float64 if os.environ.get("FUSIONVOTE_FLOAT64") else np.float32)


def default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigurationError(f"unsupported engine dtype {dt}")
    _default_dtype = dt


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Switch the whole engine to 64-bit floats for the duration of the block."""
    previous = _default_dtype
    set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(previous)


def as_tensor(data, dtype=None) -> np.ndarray:
    return np.asarray(data, dtype=dtype or _default_dtype)


@dataclass
class LayerGrad:
    """Gradients of one layer: parameter gradients by name plus the input gradient."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    input: np.ndarray | None = None


def _batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ConfigurationError(f"expected a {ndim - 1}-D or {ndim}-D tensor, got shape {x.shape}")
    return x, False


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> None:
    if w.ndim != 4:
        raise ConfigurationError(f"kernels must be [m, n, s1, s2], got shape {w.shape}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"invalid stride={stride} / padding={padding}")
    if x.shape[1] != w.shape[1]:
        raise ConfigurationError(
            f"input has {x.shape[1]} channels but kernels expect {w.shape[1]}"
        )
    if w.shape[2] > x.shape[2] + 2 * padding or w.shape[3] > x.shape[3] + 2 * padding:
        raise ConfigurationError(
            f"kernel {w.shape[2:]} larger than padded input {x.shape[2:]} (pad {padding})"
        )


def _im2col(x: np.ndarray, s1: int, s2: int, stride: int, padding: int, Ho: int, Wo: int) -> np.ndarray:
    """[B, n, H, W] -> [B, n*s1*s2, Ho*Wo] patch matrix, one strided slice copy per kernel offset."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    B, n = x.shape[:2]
    cols = np.empty((B, n, s1, s2, Ho, Wo), dtype=x.dtype)
    for l in range(s1):
        for h in range(s2):
            cols[:, :, l, h] = x[:, :, l:l + stride * Ho:stride, h:h + stride * Wo:stride]
    return cols.reshape(B, n * s1 * s2, Ho * Wo)


def _col2im(dcols: np.ndarray, shape, s1: int, s2: int, stride: int, padding: int, Ho: int, Wo: int) -> np.ndarray:
    B, n, H, W = shape
    dcols = dcols.reshape(B, n, s1, s2, Ho, Wo)
    dxp = np.zeros((B, n, H + 2 * padding, W + 2 * padding), dtype=dcols.dtype)
    for l in range(s1):
        for h in range(s2):
            dxp[:, :, l:l + stride * Ho:stride, h:h + stride * Wo:stride] += dcols[:, :, l, h]
    return dxp[:, :, padding:padding + H, padding:padding + W]


def conv2d_forward(x, kernels, bias, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation of ``x`` ([n,H,W] or [B,n,H,W]) with ``kernels`` [m,n,s1,s2].

    Each output map is the bias plus the in-channel sum of the per-kernel
    correlations; out-of-range input reads as zero.
    """
    x, squeeze = _batched(np.asarray(x), 4)
    kernels = np.asarray(kernels)
    _check_conv(x, kernels, stride, padding)
    m, n, s1, s2 = kernels.shape
    if bias is not None and np.shape(bias) != (m,):
        raise ConfigurationError(f"bias shape {np.shape(bias)} != ({m},)")
    B, _, H, W = x.shape
    Ho = conv_output_size(H, s1, stride, padding)
    Wo = conv_output_size(W, s2, stride, padding)
    cols = _im2col(x, s1, s2, stride, padding, Ho, Wo)
    out = np.matmul(kernels.reshape(m, -1), cols).reshape(B, m, Ho, Wo)
    if bias is not None:
        out += np.asarray(bias)[None, :, None, None]
    return out[0] if squeeze else out


def conv2d_backward(x, kernels, upstream, stride: int = 1, padding: int = 0,
                    need_input_grad: bool = True) -> LayerGrad:
    x, squeeze = _batched(np.asarray(x), 4)
    g, _ = _batched(np.asarray(upstream), 4)
    kernels = np.asarray(kernels)
    _check_conv(x, kernels, stride, padding)
    m, n, s1, s2 = kernels.shape
    B, _, H, W = x.shape
    Ho = conv_output_size(H, s1, stride, padding)
    Wo = conv_output_size(W, s2, stride, padding)
    if g.shape != (B, m, Ho, Wo):
        raise ConfigurationError(f"upstream grad shape {g.shape} != forward output {(B, m, Ho, Wo)}")

    cols = _im2col(x, s1, s2, stride, padding, Ho, Wo)  # [B, K, P]
    g2 = g.reshape(B, m, Ho * Wo)
    dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(m, n, s1, s2)
    db = g2.sum(axis=(0, 2))
    grads = LayerGrad(params={"weight": dw, "bias": db})
    if need_input_grad:
        dcols = np.matmul(kernels.reshape(m, -1).T, g2)  # [B, K, P]
        dx = _col2im(dcols, x.shape, s1, s2, stride, padding, Ho, Wo)
        grads.input = np.ascontiguousarray(dx[0] if squeeze else dx)
    return grads


# ---------------------------------------------------------------------------
# Dense, activations, pooling, reshaping
# ---------------------------------------------------------------------------

def dense_forward(x, weight, bias) -> np.ndarray:
    """``x @ weight.T + bias`` with ``weight`` stored [out, in]."""
    x, squeeze = _batched(np.asarray(x), 2)
    weight = np.asarray(weight)
    if x.shape[1] != weight.shape[1]:
        raise ConfigurationError(f"dense expects {weight.shape[1]} features, got {x.shape[1]}")
    out = x @ weight.T + bias
    return out[0] if squeeze else out


def dense_backward(x, weight, upstream) -> LayerGrad:
    x, squeeze = _batched(np.asarray(x), 2)
    g, _ = _batched(np.asarray(upstream), 2)
    weight = np.asarray(weight)
    if x.shape[1] != weight.shape[1] or g.shape != (x.shape[0], weight.shape[0]):
        raise ConfigurationError(
            f"dense backward shapes disagree: x {x.shape}, weight {weight.shape}, grad {g.shape}"
        )
    dx = g @ weight
    return LayerGrad(
        params={"weight": g.T @ x, "bias": g.sum(axis=0)},
        input=dx[0] if squeeze else dx,
    )


def relu_forward(x) -> np.ndarray:
    x = np.asarray(x)
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x, upstream) -> LayerGrad:
    x, g = np.asarray(x), np.asarray(upstream)
    if x.shape != g.shape:
        raise ConfigurationError(f"relu grad shape {g.shape} != input shape {x.shape}")
    return LayerGrad(input=np.where(x > 0, g, 0).astype(g.dtype, copy=False))


def _pool_corners(x: np.ndarray):
    B, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    if Ho == 0 or Wo == 0:
        raise ConfigurationError(f"maxpool2x2 needs spatial extents >= 2, got {(H, W)}")
    # window order: top-left, top-right, bottom-left, bottom-right
    return [x[:, :, r:2 * Ho:2, c:2 * Wo:2] for r in (0, 1) for c in (0, 1)]


def maxpool2x2_forward(x) -> np.ndarray:
    """2x2 max pooling with stride 2; a trailing odd row/column is dropped."""
    x, squeeze = _batched(np.asarray(x), 4)
    a, b, c, d = _pool_corners(x)
    out = np.maximum(np.maximum(a, b), np.maximum(c, d))
    return out[0] if squeeze else out


def maxpool2x2_backward(x, upstream) -> LayerGrad:
    """Routes each upstream value to the first maximal element of its window."""
    x, squeeze = _batched(np.asarray(x), 4)
    g, _ = _batched(np.asarray(upstream), 4)
    corners = _pool_corners(x)
    if g.shape != corners[0].shape:
        raise ConfigurationError(f"maxpool grad shape {g.shape} != {corners[0].shape}")
    top = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))
    dx = np.zeros(x.shape, dtype=g.dtype)
    taken = np.zeros(top.shape, dtype=bool)
    Ho, Wo = top.shape[2:]
    for (r, c), corner in zip(((0, 0), (0, 1), (1, 0), (1, 1)), corners):
        hit = (corner == top) & ~taken
        taken |= hit
        dx[:, :, r:2 * Ho:2, c:2 * Wo:2] = g * hit
    return LayerGrad(input=dx[0] if squeeze else dx)


def flatten(x) -> np.ndarray:
    x = np.asarray(x)
    return x.reshape(x.shape[0], -1)


def flatten_backward(x, upstream) -> LayerGrad:
    return LayerGrad(input=np.asarray(upstream).reshape(np.shape(x)))


def global_avg_pool(x) -> np.ndarray:
    """[B, C, H, W] -> [B, C] spatial mean."""
    return np.asarray(x).mean(axis=(2, 3))


def global_avg_pool_backward(x, upstream) -> LayerGrad:
    x = np.asarray(x)
    B, C, H, W = x.shape
    g = np.asarray(upstream)
    if g.shape != (B, C):
        raise ConfigurationError(f"global_avg_pool grad shape {g.shape} != {(B, C)}")
    dx = np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).astype(g.dtype)
    return LayerGrad(input=dx)


# ---------------------------------------------------------------------------
# Softmax
# ---------------------------------------------------------------------------

def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
