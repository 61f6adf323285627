"""Minimal differentiable-computation substrate."""
from .gradcheck import grad_check, relative_error
from .layers import LstmParams, ParamStore, conv2d, lstm_sequence, lstm_step, maxpool2d, sumpool2d
from .optim import Adam, clip_global_norm
from .tensor import (
    Tensor, add, affine, as_tensor, clip, concat, cumsum, div, exp, gather_rows, getitem, leaky_relu, log, log_softmax,
    matmul, mean, mul, padded_max, reshape, scatter_rows, sigmoid, softmax, square, sub, sum_,
    tanh, transpose,
)

__all__ = [
    "Adam", "LstmParams", "ParamStore", "Tensor", "add", "affine", "as_tensor", "clip", "clip_global_norm", "concat", "cumsum",
    "conv2d", "div", "exp", "gather_rows", "getitem", "grad_check", "leaky_relu", "log",
    "log_softmax", "lstm_sequence", "lstm_step", "matmul", "maxpool2d", "mean", "mul",
    "padded_max", "relative_error", "reshape", "scatter_rows", "sigmoid", "softmax", "square",
    "sub", "sum_", "sumpool2d", "tanh", "transpose",
]
