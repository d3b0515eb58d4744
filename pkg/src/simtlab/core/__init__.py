"""Minimal tensor engine: autodiff ops, Adam, and a finite-difference oracle."""
from . import kernels
from .gradcheck import GradCheckReport, NonFiniteLossError, finite_difference_check
from .ops import (
    DimensionError,
    MaskError,
    add,
    embedding,
    layer_norm,
    linear_forward,
    matmul,
    mul_scalar,
    multi_head_attention,
    relu,
    softmax,
    take_rows,
    total,
    weighted_nll,
)
from .optim import AdamState, MissingGradientError, adam_step
from .tensor import ParameterSet, Tensor, get_dtype, no_grad, precision

__all__ = [
    "AdamState", "DimensionError", "GradCheckReport", "MaskError", "MissingGradientError",
    "NonFiniteLossError", "ParameterSet", "Tensor", "adam_step", "add", "embedding",
    "finite_difference_check", "get_dtype", "kernels", "layer_norm", "linear_forward", "matmul",
    "mul_scalar", "multi_head_attention", "no_grad", "precision", "relu", "softmax", "take_rows",
    "total", "weighted_nll",
]
