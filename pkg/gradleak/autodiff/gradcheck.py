"""
Central finite-difference oracle for graph derivatives.
"""

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from gradleak.autodiff.tensor import Graph, Tensor, gradient
from gradleak.errors import NumericalError


@dataclass
class FdReport:
    """Outcome of one finite-difference comparison."""
    max_error: float
    kink: bool
    coordinates: int
    kink_margin: float = float("inf")

    def passed(self, tol: float) -> bool:
        return (not self.kink) and bool(np.isfinite(self.max_error)) and self.max_error < tol


def _value(f: Callable[[Tensor], Tensor], point: np.ndarray) -> float:
    graph = Graph()
    try:
        return f(graph.variable(point)).item()
    except NumericalError:
        return float("nan")


def fd_check(f: Callable[[Tensor], Tensor], point: np.ndarray, eps: float = 1e-6,
             indices: Optional[Sequence[int]] = None) -> FdReport:
    """
    Compare the analytic gradient of scalar-valued `f` at `point` with central differences.

    `f` receives a graph variable each time it is called, so it may create further
    variables on `x.graph` (e.g. model parameters it differentiates internally).

    Args:
        f: scalar-valued function of one tensor.
        point: where to evaluate.
        eps: finite-difference step (> 0).
        indices: flat coordinates to check (all by default).

    Returns:
        FdReport with max |analytic - fd| / max(1, |analytic|) over the checked
        coordinates; `kink` is set when a relu/abs/clamp/max-pool input lies
        within eps of its non-differentiable point.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    point = np.array(point, dtype=np.float64)
    graph = Graph()
    x = graph.variable(point)
    (analytic,) = gradient(f(x), [x])
    analytic = analytic.data.reshape(-1)
    margin = graph.kink_margin()

    flat = point.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    count = 0
    for i in coords:
        step = np.zeros_like(flat)
        step[i] = eps
        plus = _value(f, (flat + step).reshape(point.shape))
        minus = _value(f, (flat - step).reshape(point.shape))
        numeric = (plus - minus) / (2.0 * eps)
        if not np.isfinite(numeric):
            worst = float("inf")
        else:
            worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
        count += 1
    return FdReport(max_error=worst, kink=margin < eps, coordinates=count, kink_margin=margin)
