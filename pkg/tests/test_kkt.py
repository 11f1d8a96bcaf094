import numpy as np
import pytest
from hypothesis import given, strategies as st

from invstore.errors import SingularKkt
from invstore.kkt import backward, backward_batch, factor_kkt
from invstore.qp import QpProblem, SolverSettings, Status, solve_batch, solve_qp

from conftest import random_qp

TIGHT = SolverSettings(tol=1e-12)


def loss_grads(prob, w):
    sol = solve_qp(prob, TIGHT)
    return sol, backward(factor_kkt(prob, sol), prob, sol, w)


def fd(prob, w, name, h=1e-6):
    base = getattr(prob, name)
    out = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        vals = []
        for s in (1, -1):
            arr = base.copy()
            arr[idx] += s * h
            kw = {k: getattr(prob, k) for k in ("Q", "q", "lam", "A", "b", "G", "h")}
            kw[name] = arr
            vals.append(w @ solve_qp(QpProblem(**kw), TIGHT).y_star)
        out[idx] = (vals[0] - vals[1]) / (2 * h)
    return out


def test_k_matrix_scalar_example():
    prob = QpProblem(Q=[[1.0]], q=[0.0], lam=[0.0], G=[[-1.0]], h=[-1.0])
    sol = solve_qp(prob, TIGHT)
    f = factor_kkt(prob, sol)
    np.testing.assert_allclose(f.K, [[2.0, -1.0], [-2.0, 0.0]], atol=1e-6)
    assert np.linalg.det(f.K) == pytest.approx(-2.0, abs=1e-6)


def test_equality_rhs_gradient():
    prob = QpProblem(Q=np.eye(2), q=[1.0, 3.0], lam=[0.0, 0.0], A=[[1.0, 1.0]], b=[0.0])
    sol, g = loss_grads(prob, np.array([1.0, 0.0]))
    assert g.db == pytest.approx([0.5], abs=1e-8)


def test_unconstrained_alpha_gradient():
    # min lam y + (alpha/2) y^2 at lam=-2, alpha=1 gives y*=2 and dy/dalpha=2
    prob = QpProblem(Q=[[0.5]], q=[0.0], lam=[-2.0])
    sol, g = loss_grads(prob, np.array([-1.0]))
    assert sol.y_star == pytest.approx([2.0])
    assert 0.5 * g.dQ[0, 0] == pytest.approx(2.0, abs=1e-8)


@given(st.integers(0, 10_000))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    Q, c, A, b, G, h = random_qp(rng, n=4, p=6, m=1)
    prob = QpProblem(Q, c, np.zeros(4), A, b, G, h)
    sol = solve_qp(prob, TIGHT)
    slack = h - G @ sol.y_star
    # FD is only valid away from the strict-complementarity boundary
    if np.any((slack < 1e-4) & (sol.mu_star < 1e-4)):
        return
    w = rng.normal(size=4)
    _, g = loss_grads(prob, w)
    for name, grad in [("q", g.dq), ("lam", g.dlam), ("b", g.db), ("h", g.dh), ("G", g.dG), ("Q", g.dQ)]:
        np.testing.assert_allclose(grad, fd(prob, w, name), atol=1e-5, rtol=1e-4, err_msg=name)


def test_degenerate_vertex_warns_and_returns_finite():
    # y1 <= 0, y2 <= 0 and y1 + y2 <= 0 all active at the origin: dependent rows
    prob = QpProblem(Q=np.eye(2), q=[-1.0, -1.0], lam=[0.0, 0.0],
                     G=[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], h=[0.0, 0.0, 0.0])
    sol = solve_qp(prob, TIGHT)
    with pytest.warns(RuntimeWarning):
        g = backward(factor_kkt(prob, sol), prob, sol, np.ones(2))
    assert all(np.isfinite(a).all() for a in g.astuple())


def test_non_optimal_refused():
    prob = QpProblem(Q=[[1.0]], q=[0.0], lam=[0.0], G=[[-1.0], [1.0]], h=[-1.0, 0.0])
    sol = solve_qp(prob)
    assert sol.status == Status.INFEASIBLE
    with pytest.raises(SingularKkt):
        factor_kkt(prob, sol)


def test_batch_matches_single(rng):
    Q, c, _, _, G, h = random_qp(rng)
    cs = rng.normal(size=(4, Q.shape[0])) * 3
    W = rng.normal(size=cs.shape)
    bs = solve_batch(Q, cs, None, None, G, h, TIGHT)
    gb = backward_batch(Q, None, G, h, bs.y, bs.mu, bs.nu, bs.slack, bs.reg, W)
    for i in range(4):
        prob = QpProblem(Q, cs[i], None, G=G, h=h)
        _, g = loss_grads(prob, W[i])
        np.testing.assert_allclose(gb.dq[i], g.dq, atol=1e-7)
        np.testing.assert_allclose(gb.dh[i], g.dh, atol=1e-7)


def test_smooth_adjoint_matches_fd_on_central_path(rng):
    Q, c, _, _, G, h = random_qp(rng)
    st_ = SolverSettings(tol=1e-13, barrier=1e-2)
    w = rng.normal(size=Q.shape[0])
    s = solve_batch(Q, c[None], None, None, G, h, st_)
    g = backward_batch(Q, None, G, h, s.y, s.mu, s.nu, s.slack, s.reg, w[None], smooth=True)
    eps = 1e-6
    num = np.zeros_like(c)
    for j in range(c.size):
        e = np.zeros_like(c)
        e[j] = eps
        up = solve_batch(Q, (c + e)[None], None, None, G, h, st_).y[0]
        dn = solve_batch(Q, (c - e)[None], None, None, G, h, st_).y[0]
        num[j] = w @ (up - dn) / (2 * eps)
    np.testing.assert_allclose(g.dq[0], num, atol=1e-6)
