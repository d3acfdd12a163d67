"""Numpy tensor engine with a reverse-mode differentiation tape."""

from .tensor import (
    Tape,
    Tensor,
    VJP_RULES,
    backward,
    concat,
    gelu,
    layer_norm,
    log_softmax,
    matmul,
    relu,
    softmax,
)
from .conv import Conv2dSpec, conv2d
from .gradcheck import finite_diff_check

__all__ = [
    "Conv2dSpec",
    "Tape",
    "Tensor",
    "VJP_RULES",
    "backward",
    "concat",
    "conv2d",
    "finite_diff_check",
    "gelu",
    "layer_norm",
    "log_softmax",
    "matmul",
    "relu",
    "softmax",
]
