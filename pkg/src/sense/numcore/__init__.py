"""Small dense-tensor library with reverse-mode differentiation."""

from . import functional
from .gradcheck import GradCheckReport, grad_check, relative_error
from .tensor import Node, Tensor, backward, graph, is_grad_enabled, no_grad, topological_order

__all__ = [
    "GradCheckReport",
    "Node",
    "Tensor",
    "backward",
    "functional",
    "grad_check",
    "graph",
    "is_grad_enabled",
    "no_grad",
    "relative_error",
    "topological_order",
]
