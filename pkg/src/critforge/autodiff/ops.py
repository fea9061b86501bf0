"""Differentiable operations: convolution, dense, relu, dropout, MSE and glue.

Convolutions follow the cross-correlation convention (no kernel flip) with
weights laid out ``(out_channels, in_channels, *kernel)``. Inputs carry a
channel axis and may carry a leading batch axis; the number of spatial axes is
taken from the kernel rank.
"""

from __future__ import annotations

import itertools
import math
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, check_precision, make_node


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def conv_output_extent(n: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return ``(out, pad_before, pad_after)`` for one spatial axis.

    "same" uses ``ceil(n / stride)`` outputs with the odd padding cell placed
    after the data.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding == "valid":
        out = (n - k) // stride + 1 if n >= k else 0
        return out, 0, 0
    if padding == "same":
        out = -(-n // stride)
        total = max((out - 1) * stride + k - n, 0)
        return out, total // 2, total - total // 2
    raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")


def _im2col(xp: np.ndarray, ksize, stride, out) -> np.ndarray:
    # xp: (B, C, *padded) -> cols: (C, K, B, *out), K = prod(ksize)
    b, c = xp.shape[:2]
    cols = np.empty((c, math.prod(ksize), b) + tuple(out), dtype=xp.dtype)
    for idx, off in enumerate(itertools.product(*(range(k) for k in ksize))):
        sl = tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(off, out))
        cols[:, idx] = xp[(slice(None), slice(None)) + sl].swapaxes(0, 1)
    return cols


def conv(x, kernels, bias, stride: int = 1, padding: str = "valid") -> Tensor:
    x, kernels, bias = _as_tensor(x), _as_tensor(kernels), _as_tensor(bias)
    dtype = check_precision(x, kernels, bias)
    w = kernels.data
    nsp = w.ndim - 2
    if nsp < 1:
        raise ValueError("kernels need shape (out_ch, in_ch, *kernel)")
    cout, cin, ksize = w.shape[0], w.shape[1], w.shape[2:]
    if bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} != ({cout},)")
    batched = x.data.ndim == nsp + 2
    if not batched and x.data.ndim != nsp + 1:
        raise ValueError(f"input rank {x.data.ndim} incompatible with {nsp}-D kernels")
    xd = x.data if batched else x.data[None]
    if xd.shape[1] != cin:
        raise ValueError(f"input has {xd.shape[1]} channels, kernels expect {cin}")

    geom = [conv_output_extent(n, k, stride, padding) for n, k in zip(xd.shape[2:], ksize)]
    out = tuple(g[0] for g in geom)
    if any(o < 1 for o in out):
        raise ValueError(f"convolution output extent would be < 1: {out}")
    pads = [(0, 0), (0, 0)] + [(g[1], g[2]) for g in geom]
    xp = np.pad(xd, pads) if any(p != (0, 0) for p in pads) else xd
    cols = _im2col(xp, ksize, stride, out)
    nb = xd.shape[0]
    w2 = w.reshape(cout, -1)
    y = w2 @ cols.reshape(w2.shape[1], -1)
    y += bias.data[:, None]
    y = np.ascontiguousarray(y.reshape((cout, nb) + out).swapaxes(0, 1))
    if not batched:
        y = y[0]
    need_dx = x.requires_grad or bool(x._parents)

    def backward(g):
        g = g if batched else g[None]
        g2 = np.ascontiguousarray(g.swapaxes(0, 1)).reshape(cout, -1)
        dw = (g2 @ cols.reshape(w2.shape[1], -1).T).reshape(w.shape)
        db = g2.sum(axis=1)
        dx = None
        if need_dx:
            dcols = (w2.T @ g2).reshape((cin, math.prod(ksize), nb) + out)
            dxp = np.zeros(xp.shape, dtype=dtype)
            for idx, off in enumerate(itertools.product(*(range(k) for k in ksize))):
                sl = tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(off, out))
                dxp[(slice(None), slice(None)) + sl] += dcols[:, idx].swapaxes(0, 1)
            crop = (slice(None), slice(None)) + tuple(
                slice(p[0], p[0] + n) for p, n in zip(pads[2:], xd.shape[2:])
            )
            dx = dxp[crop]
            if not batched:
                dx = dx[0]
        return dx, dw, db

    return make_node(y, (x, kernels, bias), backward)


def dense(x, weights, bias) -> Tensor:
    """``out[..., i] = sum_j W[i, j] x[..., j] + b[i]`` for a vector or a batch of rows."""
    x, weights, bias = _as_tensor(x), _as_tensor(weights), _as_tensor(bias)
    check_precision(x, weights, bias)
    w = weights.data
    if w.ndim != 2:
        raise ValueError("weights must be a matrix")
    if x.data.shape[-1] != w.shape[1] or x.data.ndim > 2:
        raise ValueError(f"dense: input {x.shape} does not match weights {w.shape}")
    if bias.shape != (w.shape[0],):
        raise ValueError(f"dense: bias {bias.shape} does not match weights {w.shape}")
    xd = x.data
    y = xd @ w.T
    y += bias.data

    def backward(g):
        if xd.ndim == 1:
            dw = np.outer(g, xd)
            db = g
        else:
            dw = g.T @ xd
            db = g.sum(axis=0)
        return g @ w, dw, db

    return make_node(y, (x, weights, bias), backward)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    y = np.maximum(x.data, 0)
    return make_node(y, (x,), lambda g: (g * mask,))


def dropout(x, rate: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors by 1/(1-rate)."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng stream")
    keep = rng.random(x.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = keep * scale
    return make_node(x.data * mask, (x,), lambda g: (g * mask,))


def pointwise(x, kind: str, rate: float = 0.0, mode: str = "infer", rng=None) -> Tensor:
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if kind == "relu":
        return relu(x)
    if kind == "dropout":
        return dropout(x, rate, mode == "train", rng)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def mse_loss(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    check_precision(pred, target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    n = pred.size
    diff = pred.data - target.data
    loss = np.asarray([np.dot(diff.ravel(), diff.ravel()) / n], dtype=pred.dtype)

    def backward(g):
        gd = diff * (2.0 * g[0] / n)
        return gd, -gd

    return make_node(loss, (pred, target), backward)


def flatten(x, batched: bool = True) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    y = x.data.reshape(shape[0], -1) if batched else x.data.reshape(-1)
    return make_node(y, (x,), lambda g: (g.reshape(shape),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    check_precision(*ts)
    y = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(y, ts, backward)


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = np.asarray(c, dtype=x.dtype)
    return make_node(x.data * c, (x,), lambda g: (g * c,))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    check_precision(a, b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g))
