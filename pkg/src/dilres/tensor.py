"""Dense NCHW array primitives: activations, pooling, normalization, affine.

Tensors are plain ``numpy.ndarray`` values of rank 1-4 in float32 or float64.
Forward functions are pure; each one that the network differentiates has a
matching ``*_backward`` that returns the vector-Jacobian product. Reductions
run in float64 regardless of the storage dtype.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


def as_tensor(data, dtype=np.float64) -> np.ndarray:
    """Validate and convert to a contiguous tensor."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if not 1 <= arr.ndim <= 4:
        raise ShapeError(f"tensor rank must be 1-4, got {arr.ndim}")
    if arr.size == 0 or min(arr.shape) < 1:
        raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
    return arr


def offset(shape, n, c, h, w) -> int:
    """Row-major offset of (n, c, h, w) in an NCHW tensor."""
    _, C, H, W = shape
    return ((n * C + c) * H + h) * W + w


def _require_rank4(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (N, C, H, W), got shape {x.shape}")


# -- relu --------------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x, grad):
    # subgradient 0 at exactly 0
    return np.where(x > 0, grad, 0).astype(grad.dtype, copy=False)


# -- pooling -----------------------------------------------------------------

def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def pool_output_size(size, window, stride, pad=0):
    return (size + 2 * pad - window) // stride + 1


def max_pool2d(x, window, stride, padding=0):
    """Max over each window; padded cells never win (they hold -inf)."""
    _require_rank4(x)
    out, _ = _max_pool_argmax(x, window, stride, padding)
    return out


def _max_pool_argmax(x, window, stride, padding):
    kh, kw = _pair(window)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    N, C, H, W = x.shape
    if kh > H + 2 * ph or kw > W + 2 * pw:
        raise ShapeError(f"pool window {kh}x{kw} larger than padded input {H + 2 * ph}x{W + 2 * pw}")
    if ph or pw:
        xp = np.full((N, C, H + 2 * ph, W + 2 * pw), -np.inf, dtype=x.dtype)
        xp[:, :, ph:ph + H, pw:pw + W] = x
    else:
        xp = x
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw]
    Ho, Wo = windows.shape[2], windows.shape[3]
    flat = windows.reshape(N, C, Ho, Wo, kh * kw)
    # argmax returns the first maximum in row-major window order
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def max_pool2d_backward(x, grad, window, stride, padding=0):
    kh, kw = _pair(window)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    N, C, H, W = x.shape
    _, idx = _max_pool_argmax(x, window, stride, padding)
    Ho, Wo = idx.shape[2], idx.shape[3]
    rows = (np.arange(Ho) * sh)[None, None, :, None] + idx // kw - ph
    cols = (np.arange(Wo) * sw)[None, None, None, :] + idx % kw - pw
    nn = np.broadcast_to(np.arange(N)[:, None, None, None], idx.shape)
    cc = np.broadcast_to(np.arange(C)[None, :, None, None], idx.shape)
    gx = np.zeros((N, C, H, W), dtype=np.float64)
    # unbuffered scatter, applied in C order of the output grid
    np.add.at(gx, (nn, cc, rows, cols), grad.astype(np.float64))
    return gx.astype(grad.dtype)


def global_avg_pool2d(x):
    _require_rank4(x)
    x64 = x.astype(np.float64)
    # shifting by the minimum keeps the mean of a constant map exact
    lo = x64.min(axis=(2, 3), keepdims=True)
    m = lo + (x64 - lo).mean(axis=(2, 3), keepdims=True)
    return m.astype(x.dtype)


def global_avg_pool2d_backward(x, grad):
    H, W = x.shape[2], x.shape[3]
    g = np.broadcast_to(grad.astype(np.float64) / (H * W), x.shape)
    return np.ascontiguousarray(g, dtype=grad.dtype)


# -- affine ------------------------------------------------------------------

def affine(x, weight, bias):
    """``x @ weight + bias`` with x of shape (N, D), weight (D, K), bias (K,)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"affine expects (N, D) and (D, K), got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"inner extents differ: {x.shape[1]} vs {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias must have shape ({weight.shape[1]},), got {bias.shape}")
    out = x.astype(np.float64) @ weight.astype(np.float64) + bias.astype(np.float64)
    return out.astype(np.result_type(x.dtype, weight.dtype))


def affine_backward(x, weight, grad):
    g = grad.astype(np.float64)
    gx = g @ weight.astype(np.float64).T
    gw = x.astype(np.float64).T @ g
    gb = g.sum(axis=0)
    return gx.astype(x.dtype), gw.astype(weight.dtype), gb.astype(weight.dtype)


# -- batch norm --------------------------------------------------------------

@dataclass
class RunningStats:
    """Per-channel running mean/variance, updated in place during training."""
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels, momentum=0.1):
        return cls(np.zeros(channels), np.ones(channels), momentum)


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray = field(repr=False)


def batch_norm(x, gamma, beta, stats: RunningStats, mode="train", eps=1e-5, update=True):
    """Normalize per channel; returns ``(out, cache)``.

    In train mode the batch mean and population variance are used and, when
    ``update`` is true, folded into ``stats`` with an exponential moving
    average. In infer mode the running statistics are used.
    """
    _require_rank4(x)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"gamma/beta must have shape ({C},)")
    if eps < 0:
        raise ValueError("epsilon must be nonnegative")
    x64 = x.astype(np.float64)
    if mode == "train":
        mean = x64.mean(axis=(0, 2, 3))
        var = ((x64 - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
        if update:
            m = stats.momentum
            stats.mean[:] = (1 - m) * stats.mean + m * mean
            stats.var[:] = (1 - m) * stats.var + m * var
    elif mode == "infer":
        mean, var = stats.mean.astype(np.float64), stats.var.astype(np.float64)
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x64 - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.astype(np.float64)[None, :, None, None] * x_hat + beta.astype(np.float64)[None, :, None, None]
    return out.astype(x.dtype), BatchNormCache(x_hat, inv_std, gamma)


def batch_norm_backward(cache: BatchNormCache, grad, mode="train"):
    """Returns ``(grad_x, grad_gamma, grad_beta)``; train mode differentiates through batch stats."""
    g = grad.astype(np.float64)
    x_hat = cache.x_hat
    ggamma = (g * x_hat).sum(axis=(0, 2, 3))
    gbeta = g.sum(axis=(0, 2, 3))
    scale = (cache.gamma.astype(np.float64) * cache.inv_std)[None, :, None, None]
    if mode == "train":
        m = x_hat.shape[0] * x_hat.shape[2] * x_hat.shape[3]
        gx = scale * (g - gbeta[None, :, None, None] / m - x_hat * ggamma[None, :, None, None] / m)
    else:
        gx = scale * g
    dt = grad.dtype
    return gx.astype(dt), ggamma.astype(cache.gamma.dtype), gbeta.astype(cache.gamma.dtype)


# -- resampling --------------------------------------------------------------

def bilinear_weights(size_in, size_out):
    """Interpolation matrix (size_out, size_in) with half-pixel centers, edge clamped."""
    W = np.zeros((size_out, size_in), dtype=np.float64)
    scale = size_in / size_out
    for o in range(size_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), size_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, size_in - 1)
        frac = src - i0
        W[o, i0] += 1.0 - frac
        W[o, i1] += frac
    return W


def resize_bilinear_map(grid, out_h, out_w):
    """Bilinear resize of a 2-D float map (or stack with leading axes) in float64."""
    grid = np.asarray(grid, dtype=np.float64)
    H, W = grid.shape[-2:]
    if (H, W) == (out_h, out_w):
        return grid.copy()
    Wh = bilinear_weights(H, out_h)
    Ww = bilinear_weights(W, out_w)
    return Wh @ grid @ Ww.T
