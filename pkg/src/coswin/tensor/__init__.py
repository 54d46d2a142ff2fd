"""Minimal dense tensors with reverse-mode differentiation."""
from .engine import (
    Tensor,
    TapeNode,
    as_tensor,
    backward,
    inject_backward_fault,
    no_grad,
    record,
)
from .init import constant_tensor, make_rng, trunc_normal, trunc_normal_tensor
from .ops import (
    OP_NAMES,
    add,
    concat,
    conv2d_3x3,
    cyclic_shift,
    exp,
    gelu,
    getitem,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    mean,
    mul,
    permute,
    relu,
    reshape,
    scale,
    softmax,
    softmax_last_dim,
    sub,
    take_rows,
    transpose_last,
)
from .ops import sum as tsum

__all__ = [
    "OP_NAMES", "TapeNode", "Tensor", "add", "as_tensor", "backward", "concat",
    "constant_tensor", "conv2d_3x3", "cyclic_shift", "exp", "gelu", "getitem",
    "inject_backward_fault", "layer_norm", "linear", "log_softmax", "make_rng",
    "matmul", "mean", "mul", "no_grad", "permute", "record", "relu", "reshape",
    "scale", "softmax", "softmax_last_dim", "sub", "take_rows", "transpose_last",
    "trunc_normal", "trunc_normal_tensor", "tsum",
]
