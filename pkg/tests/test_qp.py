import numpy as np
import pytest
from hypothesis import given, strategies as st

from invstore.data import equality_closed_form
from invstore.errors import DimensionMismatch
from invstore.qp import QpProblem, SolverSettings, Status, kkt_residuals, solve_batch, solve_qp

from conftest import random_qp


def check_kkt(problem, sol):
    r = kkt_residuals(problem, sol)
    assert sol.status == Status.OPTIMAL
    assert r["dual_feasibility"] >= -1e-8
    assert r["equality"] <= 1e-7
    assert r["inequality"] <= 1e-7
    assert r["stationarity"] <= 1e-6
    assert r["complementarity"] <= 1e-7


def test_scalar_active_bound():
    prob = QpProblem(Q=[[1.0]], q=[0.0], lam=[0.0], G=[[-1.0]], h=[-1.0])
    sol = solve_qp(prob)
    assert sol.y_star == pytest.approx([1.0], abs=1e-8)
    assert sol.mu_star == pytest.approx([2.0], abs=1e-7)
    check_kkt(prob, sol)


def test_equality_two_variables():
    prob = QpProblem(Q=np.eye(2), q=[1.0, 3.0], lam=[0.0, 0.0], A=[[1.0, 1.0]], b=[0.0])
    sol = solve_qp(prob)
    assert sol.y_star == pytest.approx([0.5, -0.5], abs=1e-8)
    assert sol.nu_star == pytest.approx([-2.0], abs=1e-8)


def test_infeasible_detected():
    # y >= 1 and y <= 0
    prob = QpProblem(Q=[[1.0]], q=[0.0], lam=[0.0], G=[[-1.0], [1.0]], h=[-1.0, 0.0])
    assert solve_qp(prob).status == Status.INFEASIBLE


def test_iteration_cap_reported():
    Q, c, A, b, G, h = random_qp(np.random.default_rng(0), n=8, p=12)
    sol = solve_qp(QpProblem(Q, c, None, G=G, h=h), SolverSettings(max_iter=1, tol=1e-14))
    assert sol.status == Status.MAX_ITERATIONS


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        QpProblem(Q=np.eye(2), q=[1.0], lam=[0.0, 0.0])
    with pytest.raises(DimensionMismatch):
        QpProblem(Q=np.eye(2), q=[1.0, 1.0], lam=None, G=np.ones((2, 3)), h=[1.0, 1.0])


def test_singular_q_is_regularised():
    # constant-price LP-like problem: the optimum is a face, regularisation picks one point
    prob = QpProblem(Q=np.zeros((2, 2)), q=[1.0, 1.0], lam=[0.0, 0.0],
                     G=np.vstack([-np.eye(2), np.eye(2)]), h=[0.0, 0.0, 1.0, 1.0])
    a, b = solve_qp(prob), solve_qp(prob)
    assert a.reg == pytest.approx(1e-8)
    assert a.optimal
    np.testing.assert_array_equal(a.y_star, b.y_star)


@given(st.integers(0, 10_000), st.integers(2, 10), st.integers(1, 12))
def test_kkt_residuals_hold(seed, n, p):
    Q, c, A, b, G, h = random_qp(np.random.default_rng(seed), n=n, p=p, m=min(2, n - 1))
    prob = QpProblem(Q, c, None, A, b, G, h)
    check_kkt(prob, solve_qp(prob))


@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_equality_closed_form(seed, alpha):
    rng = np.random.default_rng(seed)
    n, m = 6, 2
    A = rng.normal(size=(m, n))
    b = rng.normal(size=m)
    lam = rng.normal(size=n)
    sol = solve_qp(QpProblem(0.5 * alpha * np.eye(n), np.zeros(n), lam, A, b))
    np.testing.assert_allclose(sol.y_star, equality_closed_form(lam, A, alpha, b)[0], atol=1e-6)


@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_scaling_invariance(seed, s):
    Q, c, A, b, G, h = random_qp(np.random.default_rng(seed))
    base = solve_qp(QpProblem(Q, c, None, G=G, h=h))
    scaled = solve_qp(QpProblem(s * Q, s * c, None, G=G, h=h))
    np.testing.assert_allclose(scaled.y_star, base.y_star, atol=1e-6)
    np.testing.assert_allclose(scaled.mu_star, s * base.mu_star, atol=1e-5 * max(1.0, s))


def test_deterministic(rng):
    Q, c, A, b, G, h = random_qp(rng)
    prob = QpProblem(Q, c, None, A, b, G, h)
    a, b2 = solve_qp(prob), solve_qp(prob)
    np.testing.assert_array_equal(a.y_star, b2.y_star)
    np.testing.assert_array_equal(a.mu_star, b2.mu_star)


def test_batch_matches_single(rng):
    Q, c, _, _, G, h = random_qp(rng)
    cs = rng.normal(size=(5, Q.shape[0])) * 3
    batch = solve_batch(Q, cs, None, None, G, h)
    for i in range(5):
        single = solve_qp(QpProblem(Q, cs[i], None, G=G, h=h))
        np.testing.assert_allclose(batch.y[i], single.y_star, atol=1e-9)


def test_barrier_solution_is_central(rng):
    Q, c, _, _, G, h = random_qp(rng)
    sol = solve_batch(Q, c[None], None, None, G, h, SolverSettings(tol=1e-12, barrier=1e-2))
    assert sol.optimal.all()
    np.testing.assert_allclose(sol.mu * sol.slack, 1e-2, atol=1e-10)
    assert (sol.slack > 0).all()
