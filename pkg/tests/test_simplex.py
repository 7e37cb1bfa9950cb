import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lindispatch import simplex

scipy_optimize = pytest.importorskip("scipy.optimize")


def _random_lp(rng, n, m_ub, m_eq, free_frac=0.3):
    c = rng.normal(size=n)
    A_ub = rng.normal(size=(m_ub, n))
    x_feas = rng.uniform(-1, 1, n)
    b_ub = A_ub @ x_feas + rng.uniform(0, 1, m_ub)
    A_eq = rng.normal(size=(m_eq, n))
    b_eq = A_eq @ x_feas
    bounds = []
    for j in range(n):
        if rng.random() < free_frac:
            bounds.append((None, None))
        else:
            bounds.append((x_feas[j] - rng.uniform(0, 2), x_feas[j] + rng.uniform(0, 2)))
    return c, A_ub, b_ub, A_eq, b_eq, bounds


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10**6))
def test_matches_reference_solver(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 8))
    lp = _random_lp(rng, n, int(rng.integers(0, 10)), int(rng.integers(0, min(n, 3) + 1)))
    ours = simplex.linprog(*lp)
    ref = scipy_optimize.linprog(*lp, method="highs")
    if ref.status == 0:
        assert ours.status == simplex.OPTIMAL
        assert ours.fun == pytest.approx(ref.fun, abs=1e-7, rel=1e-7)
    elif ref.status == 2:
        assert ours.status == simplex.INFEASIBLE
    elif ref.status == 3:
        assert ours.status == simplex.UNBOUNDED


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_kkt_certificate(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 8))
    c, A_ub, b_ub, A_eq, b_eq, bounds = _random_lp(rng, n, int(rng.integers(1, 12)), int(rng.integers(0, 3)))
    res = simplex.linprog(c, A_ub, b_ub, A_eq, b_eq, bounds)
    if res.status != simplex.OPTIMAL:
        return
    x = res.x
    lo = np.array([-np.inf if a is None else a for a, _ in bounds])
    hi = np.array([np.inf if b is None else b for _, b in bounds])
    stat = c + A_ub.T @ res.ineq_duals + A_eq.T @ res.eq_duals - res.lower_duals + res.upper_duals
    assert np.max(np.abs(stat)) < 1e-6
    assert np.all(res.ineq_duals >= 0) and np.all(res.lower_duals >= 0) and np.all(res.upper_duals >= 0)
    assert np.max(np.abs(res.ineq_duals * (A_ub @ x - b_ub))) < 1e-6
    fin = np.isfinite(lo)
    assert np.max(np.abs(res.lower_duals[fin] * (x[fin] - lo[fin])), initial=0) < 1e-6
    fin = np.isfinite(hi)
    assert np.max(np.abs(res.upper_duals[fin] * (hi[fin] - x[fin])), initial=0) < 1e-6


def test_unbounded_ray():
    res = simplex.linprog([-1.0, 0.0], A_ub=[[0.0, 1.0]], b_ub=[1.0])
    assert res.status == simplex.UNBOUNDED
    assert res.ray[0] > 0


def test_infeasible_bounds_and_rows():
    assert simplex.linprog([1.0], bounds=[(2.0, 1.0)]).status == simplex.INFEASIBLE
    res = simplex.linprog([1.0], A_ub=[[1.0], [-1.0]], b_ub=[0.0, -1.0])
    assert res.status == simplex.INFEASIBLE
    assert res.infeasibility > 0


def test_fixed_variable_presolve_keeps_duals():
    # x0 pinned by a single-entry equality row
    c = np.array([0.0, 1.0])
    A_eq = np.array([[1.0, 0.0]])
    A_ub = np.array([[1.0, -1.0]])   # x0 - x1 <= 0
    res = simplex.linprog(c, A_ub, [0.0], A_eq, [2.0])
    assert res.x == pytest.approx([2.0, 2.0])
    stat = c + A_ub.T @ res.ineq_duals + A_eq.T @ res.eq_duals
    assert np.abs(stat).max() < 1e-12


def test_lazy_rows_same_answer():
    rng = np.random.default_rng(3)
    for _ in range(30):
        c, A_ub, b_ub, A_eq, b_eq, bounds = _random_lp(rng, 5, 40, 1, free_frac=0.0)
        full = simplex.linprog(c, A_ub, b_ub, A_eq, b_eq, bounds)
        lazy = np.arange(40) % 2 == 0
        part = simplex.linprog(c, A_ub, b_ub, A_eq, b_eq, bounds, lazy=lazy, x0=np.zeros(5))
        assert part.status == full.status
        if full.status == simplex.OPTIMAL:
            assert part.fun == pytest.approx(full.fun, abs=1e-9)
            assert part.ineq_duals.shape == (40,)


def test_degenerate_problem_terminates():
    # many redundant constraints through one vertex
    n = 3
    A = np.vstack([np.eye(n), -np.eye(n), np.ones((20, n))])
    b = np.concatenate([np.ones(n), np.zeros(n), np.full(20, 1.0)])
    res = simplex.linprog(-np.ones(n), A, b)
    assert res.status == simplex.OPTIMAL
    assert res.fun == pytest.approx(-1.0)


def test_deterministic():
    rng = np.random.default_rng(11)
    lp = _random_lp(rng, 6, 12, 2)
    a = simplex.linprog(*lp)
    b = simplex.linprog(*lp)
    assert np.array_equal(a.x, b.x) and a.iterations == b.iterations
