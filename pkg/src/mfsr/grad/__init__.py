"""Reverse-mode automatic differentiation on dense numpy arrays."""

from .adam import AdamConfig, AdamState, adam_step
from .checkpoint import load_arrays, save_arrays
from .ops import (
    BatchNormState,
    adaptive_avg_pool2d,
    batchnorm2d,
    bicubic_matrix,
    clip,
    conv2d,
    conv_transpose2d,
    dropout,
    linear,
    maxpool2d,
    prelu,
    relu,
    separable_transform,
    upsample_bicubic,
)
from .tensor import (
    GraphError,
    NumericalError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    concat,
    divide,
    getitem,
    make_op,
    reshape,
    sqrt,
    tmean,
    tsum,
)

__all__ = [
    "AdamConfig",
    "AdamState",
    "BatchNormState",
    "GraphError",
    "NumericalError",
    "ShapeError",
    "Tensor",
    "adam_step",
    "adaptive_avg_pool2d",
    "as_tensor",
    "backward",
    "batchnorm2d",
    "bicubic_matrix",
    "clip",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "divide",
    "dropout",
    "getitem",
    "linear",
    "load_arrays",
    "make_op",
    "maxpool2d",
    "prelu",
    "relu",
    "reshape",
    "save_arrays",
    "separable_transform",
    "sqrt",
    "tmean",
    "tsum",
    "upsample_bicubic",
]
