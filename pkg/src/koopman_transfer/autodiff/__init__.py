"""Minimal reverse-mode automatic differentiation on numpy arrays."""

from .tensor import (
    Tensor,
    add,
    concat,
    dropout,
    ensure_tensor,
    gelu,
    getitem,
    layer_norm,
    linear,
    matmul,
    mean,
    mse_loss,
    mul,
    no_grad,
    relu,
    reshape,
    softmax,
    sum_of_squares,
    tanh,
    transpose,
    tsum,
)
from .nn import LayerNorm, Linear, Module, Parameter, init_normal, kaiming_uniform
from .optim import Adam, AdamW, exponential_lr, make_optimizer
from .checkpoint import load_checkpoint, save_checkpoint, state_hash

__all__ = [
    "Tensor", "add", "concat", "dropout", "ensure_tensor", "gelu", "getitem", "layer_norm", "linear",
    "matmul", "mean", "mse_loss", "mul", "no_grad", "relu", "reshape", "softmax",
    "sum_of_squares", "tanh", "transpose", "tsum",
    "LayerNorm", "Linear", "Module", "Parameter", "init_normal", "kaiming_uniform",
    "Adam", "AdamW", "exponential_lr", "make_optimizer",
    "load_checkpoint", "save_checkpoint", "state_hash",
]
