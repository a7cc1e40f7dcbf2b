"""Minimal reverse-mode autodiff over the operator set the detector needs."""

from . import kernels
from .optim import Adam, AdamState, adam_step, clip_grad_norm
from .tensor import (
    OPS,
    ComputeGraph,
    Tensor,
    add,
    affine_modulate,
    as_tensor,
    backward,
    concat,
    conv1d,
    dropout,
    embedding,
    forward_op,
    gru,
    leaky_relu,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    slice_,
    softmax,
    sqrt,
    square,
    sub,
    sum_,
    tanh,
    transpose,
)

__all__ = [
    "Adam", "AdamState", "ComputeGraph", "OPS", "Tensor", "adam_step", "add",
    "affine_modulate", "as_tensor", "backward", "clip_grad_norm", "concat",
    "conv1d", "dropout", "embedding", "forward_op", "gru", "kernels",
    "leaky_relu", "matmul", "mean", "mul", "no_grad", "relu", "reshape",
    "sigmoid", "slice_", "softmax", "sqrt", "square", "sub", "sum_", "tanh",
    "transpose",
]
