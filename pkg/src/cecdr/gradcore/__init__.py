"""Minimal reverse-mode autodiff over float64 numpy arrays, plus Adam."""
from .checkpoint import load_checkpoint, save_checkpoint
from .ops import (
    add,
    clip,
    concat,
    dropout,
    forward_op,
    gather,
    layer_norm,
    leaky_relu,
    log,
    matmul,
    max_pool,
    mean,
    mul,
    reshape,
    scale,
    sigmoid,
    softmax,
    stop_gradient,
    sub,
    sum,
    take,
    transpose,
)
from .optim import Adam, AdamState, MissingGradError, ParameterStore, adam_step
from .tensor import Graph, ShapeError, Tensor, backward

__all__ = [
    "Adam", "AdamState", "Graph", "MissingGradError", "ParameterStore", "ShapeError",
    "Tensor", "adam_step", "add", "backward", "clip", "concat", "dropout", "forward_op",
    "gather", "layer_norm", "leaky_relu", "load_checkpoint", "log", "matmul", "max_pool",
    "mean", "mul", "reshape", "save_checkpoint", "scale", "sigmoid", "softmax",
    "stop_gradient", "sub", "sum", "take", "transpose",
]
