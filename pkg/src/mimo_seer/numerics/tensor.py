"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation that
touches a tensor with ``requires_grad=True`` attaches a :class:`TapeNode` to
its output recording the inputs and the rule that maps the output gradient
back onto them. :func:`backward` orders the recorded graph topologically and
replays it once, in reverse.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TapeNode",
    "GraphError",
    "NonFiniteError",
    "as_tensor",
    "no_grad",
    "grad_enabled",
    "backward",
]


class GraphError(RuntimeError):
    """Raised for misuse of the autodiff tape (non-scalar loss, reused graph...)."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf is detected in a tensor."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, optimizer updates)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class TapeNode:
    """One recorded operation: which tensors went in and how to push gradients back."""

    __slots__ = ("op", "inputs", "backward_fn", "released")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.released = False

    def release(self) -> None:
        # drop saved intermediates held by the closure
        self.backward_fn = None
        self.released = True

    def __repr__(self) -> str:
        return f"TapeNode({self.op}, inputs={len(self.inputs)}, released={self.released})"


def _to_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is None:
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            return data
        dtype = np.float64
    return np.asarray(data, dtype=dtype)


class Tensor:
    """A numpy array plus optional gradient tracking.

    Leaves created with ``requires_grad=True`` receive their gradient in
    ``.grad`` after :meth:`backward`. ``grad`` stays ``None`` until then.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = _to_array(data, dtype)
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported dtype {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[TapeNode] = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def check_finite(self, where: str = "") -> "Tensor":
        if not self.is_finite():
            bad = int((~np.isfinite(self.data)).sum())
            label = f" in {where}" if where else ""
            raise NonFiniteError(f"{bad} non-finite value(s){label}, shape {self.shape}")
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar (implemented in ops) ---------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axes=None):
        from . import ops
        return ops.reduce(self, "sum", axes)

    def mean(self, axes=None):
        from . import ops
        return ops.reduce(self, "mean", axes)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op's output, recording a tape node only when some input needs grads."""
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = TapeNode(op, inputs, backward_fn)
    return out


def _topological(loss: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for parent in t._node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    order.reverse()
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The recorded graph is consumed: calling this again on the same loss
    without re-running the forward pass raises :class:`GraphError`.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return
        raise GraphError("loss is detached from any tensor that requires grad")
    if loss._node.released:
        raise GraphError("graph already consumed by a previous backward(); re-run the forward pass")

    grads = {id(loss): np.ones_like(loss.data)}
    for t in _topological(loss):
        g = grads.pop(id(t), None)
        node = t._node
        if node is None:
            if g is not None:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        if g is None:
            node.release()
            continue
        if node.released:
            raise GraphError(f"graph node {node.op} already consumed")
        in_grads = node.backward_fn(g)
        for parent, pg in zip(node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise GraphError(f"{node.op}: gradient shape {pg.shape} != input shape {parent.shape}")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node.release()
