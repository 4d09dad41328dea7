"""Reverse-mode autodiff with re-differentiable backward passes."""

from gradleak.autodiff import primitives  # noqa: F401  (installs Tensor operators)
from gradleak.autodiff import functional
from gradleak.autodiff.gradcheck import FdReport, fd_check
from gradleak.autodiff.tensor import Graph, Node, Tensor, evaluate, gradient

__all__ = [
    "FdReport", "Graph", "Node", "Tensor", "evaluate", "fd_check", "functional",
    "gradient", "primitives",
]
