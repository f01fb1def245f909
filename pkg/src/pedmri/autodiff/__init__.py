from .checkpoint import read_checkpoint, write_checkpoint
from .gradcheck import check_gradients, numerical_gradient, relative_error
from .optim import AdamState, adam_step
from .tensor import (ShapeError, Tensor, add, backward, conv3d, gelu, layer_norm, matmul, mean,
                     mul, relu, reshape, sigmoid, softmax, sub, sum, transpose)

__all__ = [
    "Tensor", "ShapeError", "add", "sub", "mul", "matmul", "relu", "gelu", "sigmoid", "softmax",
    "layer_norm", "conv3d", "mean", "sum", "reshape", "transpose", "backward", "AdamState",
    "adam_step", "check_gradients", "numerical_gradient", "relative_error", "read_checkpoint",
    "write_checkpoint",
]
