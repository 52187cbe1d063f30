"""Tensor construction and seeded random streams."""

from __future__ import annotations

import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .tensor import Tensor

__all__ = ["make_rng", "build", "zeros", "ones", "glorot_uniform"]

Fill = Union[str, Tuple]


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; the same seed yields the same values on every platform."""
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return np.random.Generator(np.random.PCG64(seed))


def build(shape: Sequence[int], fill: Fill = "zeros", rng: Optional[np.random.Generator] = None,
          dtype=np.float64, requires_grad: bool = False) -> Tensor:
    """Create a tensor from a fill rule.

    ``fill`` is one of ``"zeros"``, ``"ones"``, ``("constant", c)``,
    ``("uniform", a, b)`` or ``("normal", mu, sigma)``.
    """
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ValueError("shape must have at least one axis")
    if any(s < 1 for s in shape):
        raise ValueError(f"every extent must be >= 1, got {shape}")
    kind, *args = (fill,) if isinstance(fill, str) else fill
    if kind == "zeros":
        data = np.zeros(shape)
    elif kind == "ones":
        data = np.ones(shape)
    elif kind == "constant":
        (c,) = args
        if not math.isfinite(c):
            raise ValueError(f"fill constant must be finite, got {c}")
        data = np.full(shape, float(c))
    elif kind in ("uniform", "normal"):
        if rng is None:
            raise ValueError(f"{kind} fill needs an rng")
        a, b = args
        data = rng.uniform(a, b, size=shape) if kind == "uniform" else rng.normal(a, b, size=shape)
    else:
        raise ValueError(f"unknown fill rule {fill!r}")
    return Tensor(data.astype(dtype), requires_grad=requires_grad)


def zeros(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return build(shape, "zeros", dtype=dtype, requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return build(shape, "ones", dtype=dtype, requires_grad=requires_grad)


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float64) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return build(shape, ("uniform", -bound, bound), rng=rng, dtype=dtype, requires_grad=True)
