from collections import deque

import numpy as np

from gradleak.errors import NonFiniteError
from gradleak.lbfgs import minimize_lbfgs, two_loop


def quadratic(x):
    return float(np.sum((x - 3.0) ** 2)), 2.0 * (x - 3.0)


def rosenbrock(x):
    a, b = x
    value = (1.0 - a) ** 2 + 100.0 * (b - a * a) ** 2
    grad = np.array([-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)])
    return value, grad


def test_one_dimensional_quadratic():
    result = minimize_lbfgs(quadratic, np.array([0.0]))
    assert abs(result.x[0] - 3.0) < 1e-8
    assert result.converged
    assert not result.line_search_failed


def test_active_lower_bound():
    result = minimize_lbfgs(lambda x: (float(x @ x), 2.0 * x), np.array([1.7]), lo=1.0, hi=2.0)
    assert result.x[0] == 1.0


def test_rosenbrock():
    result = minimize_lbfgs(rosenbrock, np.array([-1.2, 1.0]), max_iter=1000)
    np.testing.assert_allclose(result.x, [1.0, 1.0], atol=1e-5)


def test_iterates_stay_in_box():
    seen = []
    lo, hi = np.array([-0.5, 0.0]), np.array([0.5, 2.0])
    minimize_lbfgs(rosenbrock, np.array([0.2, 1.5]), lo=lo, hi=hi, max_iter=50,
                   callback=lambda it, x, f: seen.append(x.copy()))
    assert seen
    assert all(np.all(x >= lo) and np.all(x <= hi) for x in seen)


def test_trace_is_non_increasing():
    result = minimize_lbfgs(rosenbrock, np.array([-1.2, 1.0]), max_iter=100)
    assert all(b <= a for a, b in zip(result.trace, result.trace[1:]))


def test_two_loop_without_history_is_identity():
    g = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(two_loop(g, deque()), g)


def test_two_loop_inverts_a_diagonal_quadratic():
    hessian = np.diag([2.0, 8.0])
    pairs = deque()
    for s in (np.array([1.0, 0.0]), np.array([0.0, 1.0])):
        y = hessian @ s
        pairs.append((s, y, 1.0 / s.dot(y)))
    g = np.array([4.0, 4.0])
    np.testing.assert_allclose(two_loop(g, pairs), np.linalg.solve(hessian, g))


def test_failed_line_search_is_recorded_not_raised():
    def wrong_gradient(x):
        return float(x @ x), -2.0 * x

    result = minimize_lbfgs(wrong_gradient, np.array([1.0]), max_iter=10)
    assert result.line_search_failed
    assert not result.converged
    np.testing.assert_array_equal(result.x, [1.0])


def test_unevaluable_trial_points_are_backtracked():
    def guarded(x):
        if x[0] > 2.5:
            raise NonFiniteError("outside the domain")
        return quadratic(x)

    result = minimize_lbfgs(guarded, np.array([0.0]), max_iter=30)
    assert result.x[0] <= 2.5
    assert result.fun < result.trace[0]
