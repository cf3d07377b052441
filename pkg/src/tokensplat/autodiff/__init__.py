from .tensor import (
    GradError,
    Parameter,
    ShapeError,
    Tensor,
    add,
    clamp,
    concat,
    conv_transpose2d,
    custom_op,
    div,
    exp,
    expand,
    gelu,
    getitem,
    layernorm,
    linear,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    norm,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    stack,
    sub,
    swapaxes,
    tanh,
    transpose,
    tsum,
)
from .nn import ConvTranspose2d, LayerNorm, Linear, MLP, Module
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .optim import Adam

__all__ = [
    "Adam", "CheckpointError", "ConvTranspose2d", "GradError", "LayerNorm", "Linear", "MLP",
    "Module", "Parameter", "ShapeError", "Tensor", "add", "clamp", "concat", "conv_transpose2d",
    "custom_op", "div", "exp", "expand", "gelu", "getitem", "layernorm", "linear", "load_checkpoint",
    "log", "matmul", "mean", "mul", "no_grad", "norm", "relu", "reshape", "save_checkpoint",
    "sigmoid", "softmax", "sqrt", "stack", "sub", "swapaxes", "tanh", "transpose", "tsum",
]
