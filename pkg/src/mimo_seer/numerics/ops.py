"""Differentiable operations on :class:`~mimo_seer.numerics.tensor.Tensor`.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to input gradients. Reductions accumulate in 64-bit
regardless of storage precision.
"""

from __future__ import annotations

from itertools import product
from math import prod
from typing import Optional, Sequence, Union

import numpy as np

from .tensor import Tensor, as_tensor, make_result

__all__ = [
    "add", "sub", "mul", "div", "neg", "square",
    "reshape", "transpose", "getitem", "concat", "broadcast_to",
    "matmul", "softmax", "sigmoid", "silu", "layer_norm", "reduce",
    "conv2d", "conv3d", "conv_nd",
]

Axes = Optional[Union[int, Sequence[int]]]


def _operands(a, b):
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    dtype = (ta if ta is not None else tb).dtype
    if ta is None:
        ta = Tensor(np.asarray(a, dtype=dtype))
    if tb is None:
        tb = Tensor(np.asarray(b, dtype=dtype))
    return ta, tb


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _operands(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    ad, bd = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g * bd, a.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, b.shape) if b.requires_grad else None,
        )

    return make_result(ad * bd, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    ad, bd = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g / bd, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * ad / (bd * bd), b.shape) if b.requires_grad else None,
        )

    return make_result(ad / bd, (a, b), back, "div")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


# -- shape ----------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    src_shape, dtype = a.shape, a.dtype
    advanced = _is_advanced(index)

    def back(g):
        out = np.zeros(src_shape, dtype=dtype)
        if advanced:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return make_result(a.data[index], (a,), back, "getitem")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    data = np.broadcast_to(a.data, shape)
    return make_result(data, (a,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


# -- contractions ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = _operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), back, "matmul")


# -- nonlinearities -------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), back, "softmax")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # exp(-v) overflows to inf for very negative v, giving the correct limit 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-v))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)

    def back(g):
        return (g * (s + xd * s * (1.0 - s)),)

    return make_result(xd * s, (x,), back, "silu")


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing axes covered by ``gain``'s shape, then scale and shift."""
    if gain.shape != offset.shape:
        raise ValueError("gain and offset shapes differ")
    k = gain.ndim
    if x.shape[x.ndim - k:] != gain.shape:
        raise ValueError(f"layer_norm: trailing extents {x.shape[x.ndim - k:]} != {gain.shape}")
    axes = tuple(range(x.ndim - k, x.ndim))
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True, dtype=np.float64)
    centered = xd - mu.astype(xd.dtype)
    var = (centered * centered).mean(axis=axes, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = centered * inv
    gd = gain.data
    lead = tuple(range(x.ndim - k))

    def back(g):
        gx = gg = go = None
        if x.requires_grad:
            dxhat = g * gd
            m1 = dxhat.mean(axis=axes, keepdims=True, dtype=np.float64).astype(xd.dtype)
            m2 = (dxhat * xhat).mean(axis=axes, keepdims=True, dtype=np.float64).astype(xd.dtype)
            gx = inv * (dxhat - m1 - xhat * m2)
        if gain.requires_grad:
            gg = (g * xhat).sum(axis=lead, dtype=np.float64).astype(xd.dtype)
        if offset.requires_grad:
            go = g.sum(axis=lead, dtype=np.float64).astype(xd.dtype)
        return gx, gg, go

    return make_result(xhat * gd + offset.data, (x, gain, offset), back, "layer_norm")


# -- reductions -----------------------------------------------------------

_REDUCE_KINDS = ("sum", "mean", "sum_of_squares", "sum_of_abs")


def reduce(x: Tensor, kind: str = "sum", axes: Axes = None) -> Tensor:
    """sum / mean / sum_of_squares / sum_of_abs over ``axes`` (all if None).

    ``sum_of_abs`` uses sign(0) = 0 as its subgradient.
    """
    if kind not in _REDUCE_KINDS:
        raise ValueError(f"unknown reduction {kind!r}")
    if axes is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % x.ndim for a in axes) if x.ndim else ()
    xd = x.data
    count = prod(x.shape[a] for a in axes)

    if kind in ("sum", "mean"):
        vals = xd
    elif kind == "sum_of_squares":
        vals = xd * xd
    else:
        vals = np.abs(xd)
    out = vals.sum(axis=axes, dtype=np.float64)
    if kind == "mean":
        out = out / count
    out = np.asarray(out, dtype=xd.dtype)

    def back(g):
        gk = np.expand_dims(g, axes) if axes else g
        if kind == "sum":
            d = np.broadcast_to(gk, x.shape)
        elif kind == "mean":
            d = np.broadcast_to(gk / count, x.shape)
        elif kind == "sum_of_squares":
            d = 2.0 * xd * gk
        else:
            d = np.sign(xd) * gk
        return (np.array(d, dtype=xd.dtype),)

    return make_result(out, (x,), back, kind)


# -- convolution ----------------------------------------------------------

def _as_tuple(v, n: int) -> tuple:
    if isinstance(v, int):
        return (v,) * n
    v = tuple(v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


def conv_nd(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0,
            channels_last: bool = False) -> Tensor:
    """N-d cross-correlation: x [B, Cin, *S], w [Cout, Cin, *K] -> [B, Cout, *S'].

    With ``channels_last`` the input and output are laid out [B, *S, C]
    instead; the kernel layout is unchanged. Computed as im2col followed by a
    single GEMM.
    """
    nd = x.ndim - 2
    if nd < 1 or w.ndim != nd + 2:
        raise ValueError(f"conv expects x [B,C,*S] and w [Cout,Cin,*K] of matching rank, got {x.shape}, {w.shape}")
    B = x.shape[0]
    cin = x.shape[-1] if channels_last else x.shape[1]
    in_sp = x.shape[1:-1] if channels_last else x.shape[2:]
    cout, wcin = w.shape[:2]
    if wcin != cin:
        raise ValueError(f"conv channel mismatch: input has {cin}, kernel expects {wcin}")
    ks = w.shape[2:]
    stride = _as_tuple(stride, nd)
    padding = _as_tuple(padding, nd)
    if any(s < 1 for s in stride):
        raise ValueError("stride must be >= 1")
    padded = tuple(n + 2 * p for n, p in zip(in_sp, padding))
    out_sp = []
    for n, k, s in zip(padded, ks, stride):
        if k > n:
            raise ValueError(f"kernel extent {k} exceeds padded input extent {n}")
        if (n - k) % s:
            raise ValueError(f"non-integer output extent: ({n} - {k}) / {s}")
        out_sp.append((n - k) // s + 1)
    out_sp = tuple(out_sp)
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} != ({cout},)")

    dtype = x.dtype
    xl = x.data if channels_last else np.moveaxis(x.data, 1, -1)
    interior = (slice(None),) + tuple(slice(p, p + n) for p, n in zip(padding, in_sp))
    if any(padding):
        buf = np.zeros((B,) + padded + (cin,), dtype=dtype)
        buf[interior] = xl
        xl = buf
    else:
        xl = np.ascontiguousarray(xl)
    kvol = prod(ks)
    windows = [
        (slice(None),) + tuple(slice(o, o + s * (n - 1) + 1, s) for o, n, s in zip(off, out_sp, stride))
        for off in product(*(range(k) for k in ks))
    ]
    rows = B * prod(out_sp)
    if kvol == 1 and all(s == 1 for s in stride):
        cols = xl.reshape(rows, cin)
    else:
        cols = np.empty((B,) + out_sp + (kvol, cin), dtype=dtype)
        for k, win in enumerate(windows):
            cols[..., k, :] = xl[win]
        cols = cols.reshape(rows, kvol * cin)
    # [*K, Cin, Cout] flattened to match the column layout
    wmat = np.moveaxis(w.data, (0, 1), (-1, -2)).reshape(kvol * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape((B,) + out_sp + (cout,))
    y = out if channels_last else np.ascontiguousarray(np.moveaxis(out, -1, 1))

    def back(g):
        gl = (g if channels_last else np.moveaxis(g, 1, -1)).reshape(rows, cout)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.moveaxis((cols.T @ gl).reshape(ks + (cin, cout)), (-1, -2), (0, 1))
            gw = np.ascontiguousarray(gw)
        if bias is not None and bias.requires_grad:
            gb = gl.sum(axis=0, dtype=np.float64).astype(dtype)
        if x.requires_grad:
            # one [rows, Cin] gradient slab per kernel offset, scattered back onto the padded input
            wk = np.ascontiguousarray(wmat.reshape(kvol, cin, cout).transpose(0, 2, 1))
            dk = np.matmul(gl, wk).reshape((kvol, B) + out_sp + (cin,))
            dxl = np.zeros(xl.shape, dtype=dtype)
            for k, win in enumerate(windows):
                dxl[win] += dk[k]
            dxl = dxl[interior]
            gx = np.ascontiguousarray(dxl if channels_last else np.moveaxis(dxl, -1, 1))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, w, bias) if bias is not None else (x, w)
    return make_result(y, inputs, back, f"conv{nd}d")


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """x [B, Cin, H, W] * w [Cout, Cin, kh, kw] -> [B, Cout, H', W']."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape}, {w.shape}")
    return conv_nd(x, w, bias, stride, padding)


def conv3d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, padding=0) -> Tensor:
    """x [B, Cin, D, H, W] * w [Cout, Cin, kd, kh, kw] -> [B, Cout, D', H', W'], stride 1."""
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv3d expects 5-d input and kernel, got {x.shape}, {w.shape}")
    return conv_nd(x, w, bias, 1, padding)
