"""
Box-projected L-BFGS with the two-loop recursion and Armijo backtracking.

Works on flat numpy vectors; `fun(x)` returns (value, gradient).
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, List, Optional, Tuple

import numpy as np

from gradleak.errors import LineSearchError, NumericalError

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]

# Curvature pairs with s.y below this (relative) are skipped
CURVATURE_EPS = 1e-12


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    iterations: int
    converged: bool
    line_search_failed: bool = False
    trace: List[float] = field(default_factory=list)


def _project(x: np.ndarray, lo, hi) -> np.ndarray:
    if lo is None and hi is None:
        return x
    return np.clip(x, lo, hi)


def _projected_gradient(x: np.ndarray, g: np.ndarray, lo, hi) -> np.ndarray:
    return x - _project(x - g, lo, hi)


def _active_set(x: np.ndarray, g: np.ndarray, lo, hi) -> np.ndarray:
    """Coordinates pinned at a bound with the gradient pushing outwards."""
    active = np.zeros(x.shape, dtype=bool)
    if lo is not None:
        active |= (x <= lo) & (g > 0)
    if hi is not None:
        active |= (x >= hi) & (g < 0)
    return active


def two_loop(g: np.ndarray, pairs: Deque[Tuple[np.ndarray, np.ndarray, float]]) -> np.ndarray:
    """H g for the L-BFGS inverse-Hessian approximation stored in `pairs` (s, y, 1/s.y)."""
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * s.dot(q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= s.dot(y) / y.dot(y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * y.dot(q)
        q += (a - b) * s
    return q


def _backtrack(fun: Objective, x: np.ndarray, f: float, g: np.ndarray, d: np.ndarray,
               step: float, lo, hi, c1: float, max_backtracks: int):
    for _ in range(max_backtracks):
        x_new = _project(x + step * d, lo, hi)
        try:
            f_new, g_new = fun(x_new)
        except NumericalError as e:
            # a trial point the objective cannot evaluate counts as a rejected step
            logger.debug("Line search trial rejected at step %.3e: %s", step, e)
            step *= 0.5
            continue
        if np.isfinite(f_new) and f_new <= f + c1 * g.dot(x_new - x):
            return x_new, f_new, g_new
        step *= 0.5
    raise LineSearchError(f"Armijo condition not met after {max_backtracks} backtracking steps")


def minimize_lbfgs(fun: Objective, x0: np.ndarray, lo=None, hi=None, memory: int = 10,
                   max_iter: int = 200, c1: float = 1e-4, tol: float = 1e-10,
                   max_backtracks: int = 40,
                   callback: Optional[Callable[[int, np.ndarray, float], None]] = None) -> LbfgsResult:
    """
    Minimize `fun` over the box [lo, hi] (either side may be None).

    A failed line search ends the run with the current iterate and sets
    `line_search_failed`; it is not raised.
    """
    shape = np.shape(x0)
    flat_lo = None if lo is None else np.broadcast_to(lo, shape).reshape(-1)
    flat_hi = None if hi is None else np.broadcast_to(hi, shape).reshape(-1)

    def flat_fun(v: np.ndarray) -> Tuple[float, np.ndarray]:
        value, grad = fun(v.reshape(shape))
        return float(value), np.asarray(grad, dtype=np.float64).reshape(-1)

    x = _project(np.array(x0, dtype=np.float64).reshape(-1), flat_lo, flat_hi)
    f, g = flat_fun(x)
    trace = [f]
    pairs: Deque[Tuple[np.ndarray, np.ndarray, float]] = deque(maxlen=memory)
    converged = failed = False
    iteration = 0

    for iteration in range(1, max_iter + 1):
        if np.max(np.abs(_projected_gradient(x, g, flat_lo, flat_hi)), initial=0.0) <= tol:
            converged = True
            iteration -= 1
            break
        active = _active_set(x, g, flat_lo, flat_hi)
        d = -two_loop(np.where(active, 0.0, g), pairs)
        d[active] = 0.0
        if d.dot(g) >= 0:
            # not a descent direction: drop the curvature history
            pairs.clear()
            d = -np.where(active, 0.0, g)
        step = 1.0 if pairs else min(1.0, 1.0 / max(np.linalg.norm(d), 1e-300))
        try:
            x_new, f_new, g_new = _backtrack(flat_fun, x, f, g, d, step, flat_lo, flat_hi, c1, max_backtracks)
        except LineSearchError as e:
            logger.warning("L-BFGS stopped at iteration %d: %s", iteration, e)
            failed = True
            iteration -= 1
            break
        s, y = x_new - x, g_new - g
        sy = s.dot(y)
        if sy > CURVATURE_EPS * max(1.0, np.linalg.norm(s) * np.linalg.norm(y)):
            pairs.append((s, y, 1.0 / sy))
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        if callback is not None:
            callback(iteration, x.reshape(shape), f)
    else:
        converged = np.max(np.abs(_projected_gradient(x, g, flat_lo, flat_hi)), initial=0.0) <= tol

    return LbfgsResult(x.reshape(shape), f, iteration, bool(converged), failed, trace)
