"""Minimal reverse-mode automatic differentiation over numpy arrays."""

from . import ops
from .gradcheck import check_gradients, numerical_grad, relative_error
from .nn import Conv2d, Linear, Module, Parameter, kaiming, zeros
from .ops import (
    binary_cross_entropy,
    bilinear_sample,
    conv2d,
    depthwise_xcorr,
    grad_reverse,
    linear,
    log_softmax,
    maxpool2d,
    relu,
    sigmoid,
    smooth_l1,
    softmax,
)
from .tensor import Tensor, as_tensor, get_default_dtype, precision, set_default_dtype

__all__ = [
    "ops", "Tensor", "as_tensor", "precision", "get_default_dtype", "set_default_dtype",
    "Module", "Parameter", "Conv2d", "Linear", "kaiming", "zeros",
    "check_gradients", "numerical_grad", "relative_error",
    "conv2d", "depthwise_xcorr", "grad_reverse", "linear", "relu", "maxpool2d",
    "sigmoid", "softmax", "log_softmax", "binary_cross_entropy", "smooth_l1",
    "bilinear_sample",
]
