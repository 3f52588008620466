"""Minimal dense-tensor engine with reverse-mode differentiation."""

from . import nn
from .gradcheck import GradCheckReport, gradient_check
from .nn import ConfigError, Module, Parameter
from .tensor import NumericError, ShapeError, Tensor, no_grad

__all__ = [
    "ConfigError", "GradCheckReport", "Module", "NumericError", "Parameter", "ShapeError",
    "Tensor", "gradient_check", "nn", "no_grad",
]
