"""Central-difference verification of autodiff gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, no_grad

__all__ = ["grad_check", "numerical_grad", "NonDeterministicError"]


class NonDeterministicError(RuntimeError):
    pass


def _scalar(f: Callable[[Tensor], Tensor], x: Tensor) -> float:
    with no_grad():
        out = f(x)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    return float(out.data.reshape(()))


def numerical_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                   indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """(f(x + h e_i) - f(x - h e_i)) / 2h for each flat coordinate i (all if ``indices`` is None).

    Coordinates not in ``indices`` are left at zero.
    """
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f, x)
        flat[i] = orig - h
        fm = _scalar(f, x)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               indices: Optional[Sequence[int]] = None) -> float:
    """Worst relative error between autodiff and central differences.

    The relative error of each coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``x`` must be a float64 leaf; its ``grad`` is overwritten.
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check requires float64 tensors")
    if _scalar(f, x) != _scalar(f, x):
        raise NonDeterministicError("f returned different values for identical input")

    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64)
    numeric = numerical_grad(f, x, h, indices)

    if indices is not None:
        idx = np.asarray(list(indices), dtype=np.int64)
        analytic = analytic.reshape(-1)[idx]
        numeric = numeric.reshape(-1)[idx]
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if denom.size else 0.0
