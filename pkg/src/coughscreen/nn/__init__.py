"""From-scratch reverse-mode autodiff, layers and Adam."""

from . import functional
from .layers import BatchNorm2d, Conv2d, Linear, Module, Parameter, kaiming_uniform
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, as_tensor, grad_enabled, no_grad

__all__ = [
    "Adam",
    "AdamState",
    "BatchNorm2d",
    "Conv2d",
    "Linear",
    "Module",
    "Parameter",
    "Tensor",
    "adam_step",
    "as_tensor",
    "functional",
    "grad_enabled",
    "kaiming_uniform",
    "no_grad",
]
