import numpy as np
import pytest
from scipy.optimize import minimize

from tube_platoon.qp import MAX_ITER, PRIMAL_INFEASIBLE, SOLVED, is_feasible, kkt_residuals, solve_qp


def random_qp(rng, n, m):
    g = rng.normal(size=(n, n))
    p = g @ g.T + 0.1 * np.eye(n)
    q = rng.normal(size=n)
    a = rng.normal(size=(m, n))
    x0 = rng.normal(size=n)
    ax = a @ x0
    lo = ax - rng.uniform(0.1, 1, m)
    hi = ax + rng.uniform(0.1, 1, m)
    lo[rng.uniform(size=m) < 0.3] = -np.inf
    return p, q, a, lo, hi


def reference(p, q, a, lo, hi):
    cons = []
    for i in range(len(lo)):
        if np.isfinite(hi[i]):
            cons.append({"type": "ineq", "fun": lambda x, i=i: hi[i] - a[i] @ x, "jac": lambda x, i=i: -a[i]})
        if np.isfinite(lo[i]):
            cons.append({"type": "ineq", "fun": lambda x, i=i: a[i] @ x - lo[i], "jac": lambda x, i=i: a[i]})
    res = minimize(lambda x: 0.5 * x @ p @ x + q @ x, np.zeros(len(q)), jac=lambda x: p @ x + q,
                   constraints=cons, method="SLSQP", options={"ftol": 1e-12, "maxiter": 500})
    return res.x


@pytest.mark.parametrize("seed", range(20))
def test_random_qps_match_reference(seed):
    rng = np.random.default_rng(seed)
    p, q, a, lo, hi = random_qp(rng, rng.integers(2, 8), rng.integers(3, 12))
    res = solve_qp(p, q, a, lo, hi)
    assert res.status == SOLVED
    ref = reference(p, q, a, lo, hi)
    assert res.x == pytest.approx(ref, abs=1e-5)
    prim, dual = kkt_residuals(p, q, a, lo, hi, res.x, res.y)
    assert prim <= 1e-7 and dual <= 1e-7


def test_unconstrained_closed_form():
    p = np.array([[2.0, 0.5], [0.5, 1.0]])
    q = np.array([1.0, -1.0])
    res = solve_qp(p, q, np.eye(2), [-np.inf] * 2, [np.inf] * 2)
    assert res.x == pytest.approx(np.linalg.solve(p, -q))


def test_equality_constrained():
    # min x^2 + y^2 s.t. x + y = 1 -> (0.5, 0.5)
    res = solve_qp(2 * np.eye(2), np.zeros(2), [[1.0, 1.0]], [1.0], [1.0])
    assert res.status == SOLVED
    assert res.x == pytest.approx([0.5, 0.5], abs=1e-8)


def test_box_active():
    # min (x - 3)^2 with x <= 1
    res = solve_qp([[2.0]], [-6.0], [[1.0]], [-np.inf], [1.0])
    assert res.x == pytest.approx([1.0], abs=1e-8)
    assert res.y[0] > 0


def test_infeasible_detected():
    a = np.array([[1.0, 0.0], [1.0, 0.0]])
    res = solve_qp(np.eye(2), np.zeros(2), a, [1.0, -np.inf], [np.inf, 0.0])
    assert res.status == PRIMAL_INFEASIBLE
    assert not is_feasible(a, [1.0, -np.inf], [np.inf, 0.0], 2)


def test_iteration_cap_status():
    rng = np.random.default_rng(0)
    p, q, a, lo, hi = random_qp(rng, 6, 10)
    res = solve_qp(p, q, a, lo, hi, max_iter=25, polish=False)
    assert res.status in (MAX_ITER, SOLVED)
    if res.status == MAX_ITER:
        assert res.iterations == 25
