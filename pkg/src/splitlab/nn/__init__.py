"""Minimal numpy layer engine with explicit backward rules."""

from splitlab.nn.gradcheck import check_scalar_fn, grad_check
from splitlab.nn.layers import (
    Conv2d,
    Dense,
    Flatten,
    InstanceNorm,
    Layer,
    LeakyReLU,
    MinibatchStd,
    ReLU,
    Rescale,
    Reshape,
    ShapeError,
    StyleConv2d,
    Tanh,
    Upsample2x,
)
from splitlab.nn.optim import SGD, Adam, NonFiniteGradient
from splitlab.nn.regularizers import (
    kl_gaussian_reg,
    kl_gaussian_reg_grad,
    softmax_cross_entropy,
    total_variation,
    total_variation_grad,
)
from splitlab.nn.stack import Grads, Stack, StackShapeError, StaleCacheError, param_checksum

__all__ = [
    "Adam", "Conv2d", "Dense", "Flatten", "Grads", "InstanceNorm", "Layer", "LeakyReLU", "MinibatchStd", "NonFiniteGradient",
    "ReLU", "Rescale", "Reshape", "SGD", "ShapeError", "Stack", "StackShapeError", "StaleCacheError",
    "StyleConv2d", "Tanh", "Upsample2x", "check_scalar_fn", "grad_check", "kl_gaussian_reg",
    "kl_gaussian_reg_grad", "param_checksum", "softmax_cross_entropy", "total_variation",
    "total_variation_grad",
]
