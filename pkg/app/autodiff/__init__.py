"""Dense tensors, reverse-mode differentiation and the Adam optimizer."""

from .optim import Adam, NonFiniteGradientError
from .tensor import Graph, ShapeError, Tensor, current_graph, default_dtype, precision

__all__ = [
    "Adam",
    "Graph",
    "NonFiniteGradientError",
    "ShapeError",
    "Tensor",
    "current_graph",
    "default_dtype",
    "precision",
]
