from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .optim import NonFiniteGradient, ParamStore, adam_step, forward_backward, glorot_uniform
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    conv2d,
    div,
    exp,
    getitem,
    l2norm,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    slice_,
    softmax_cross_entropy,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
)

__all__ = [
    "CheckpointError", "NonFiniteGradient", "ParamStore", "ShapeError", "Tensor",
    "adam_step", "add", "as_tensor", "concat", "conv2d", "div", "exp", "forward_backward",
    "getitem", "glorot_uniform", "grad_check", "l2norm", "load_checkpoint", "log", "matmul",
    "mean", "mul", "no_grad", "relu", "reshape", "save_checkpoint", "sigmoid", "slice_",
    "softmax_cross_entropy", "stack", "sub", "tanh", "transpose", "tsum",
]
