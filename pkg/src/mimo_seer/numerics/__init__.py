"""Dense tensor arithmetic with reverse-mode automatic differentiation."""

from .gradcheck import NonDeterministicError, grad_check, numerical_grad
from .init import build, glorot_uniform, make_rng, ones, zeros
from .ops import (
    add,
    broadcast_to,
    concat,
    conv2d,
    conv3d,
    conv_nd,
    div,
    getitem,
    layer_norm,
    matmul,
    mul,
    neg,
    reduce,
    reshape,
    sigmoid,
    silu,
    softmax,
    square,
    sub,
    transpose,
)
from .tensor import GraphError, NonFiniteError, TapeNode, Tensor, as_tensor, backward, grad_enabled, no_grad

__all__ = [
    "Tensor", "TapeNode", "GraphError", "NonFiniteError", "NonDeterministicError",
    "as_tensor", "backward", "no_grad", "grad_enabled",
    "build", "zeros", "ones", "make_rng", "glorot_uniform",
    "grad_check", "numerical_grad",
    "add", "sub", "mul", "div", "neg", "square",
    "reshape", "transpose", "getitem", "concat", "broadcast_to",
    "matmul", "softmax", "sigmoid", "silu", "layer_norm", "reduce",
    "conv2d", "conv3d", "conv_nd",
]
