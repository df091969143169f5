"""Minimal reverse-mode automatic differentiation over numpy arrays."""
from . import ops
from .ops import REGISTRY
from .optim import Adam, AdamState, adam_step
from .tensor import GraphError, NumericFault, Tensor, as_tensor, backward

__all__ = ["ops", "REGISTRY", "Adam", "AdamState", "adam_step", "GraphError",
           "NumericFault", "Tensor", "as_tensor", "backward"]
