import numpy as np
import pytest
from hypothesis import given, strategies as st

from invstore import storage
from invstore.errors import DimensionMismatch
from invstore.kkt import backward, factor_kkt
from invstore.qp import SolverSettings, solve_qp
from invstore.storage import SocCostParams, StorageParams

TIGHT = SolverSettings(tol=1e-12)


def quad(**kw):
    base = dict(c1=5.0, c2=2.0, eta_sq=0.9, e_min_shift=-0.5, e_max_shift=0.5, p_max=0.5, T=24)
    base.update(kw)
    return StorageParams(**base)


def test_one_hour_energy_bounds():
    p = StorageParams.from_physical(c1=0, c2=0, eta=0.9, e_min=0.0, e_max=0.5, e0=0.25, p_max=1.0, T=1)
    assert p.e_min_shift == pytest.approx(-0.25 * 0.9)
    assert p.e_max_shift == pytest.approx(0.25 * 0.9)


def test_flat_single_period_no_action():
    p = quad(T=1, c1=20.0, c2=1.0)
    sol = solve_qp(storage.assemble(p, [10.0]))
    assert sol.y_star == pytest.approx([0.0, 0.0], abs=1e-6)


def test_soc_model_reduces_to_quadratic_when_c1_zero():
    q = quad(c1=0.0)
    s = SocCostParams(**{k: v for k, v in q.to_dict().items() if k != "model"})
    prices = np.random.default_rng(0).uniform(10, 80, 24)
    a = solve_qp(storage.assemble(q, prices), TIGHT).y_star
    b = solve_qp(storage.assemble(s, prices), TIGHT).y_star
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_price_length_checked():
    with pytest.raises(DimensionMismatch):
        storage.assemble(quad(), np.ones(23))


def test_validation():
    with pytest.raises(ValueError):
        quad(eta_sq=1.2).validate()
    with pytest.raises(ValueError):
        quad(e_min_shift=1.0).validate()
    with pytest.raises(ValueError):
        quad(c2=-1).validate()


@given(st.integers(0, 10_000), st.floats(0.8, 1.0), st.floats(0.0, 20.0), st.floats(0.0, 20.0))
def test_dispatch_feasible_and_energy_recovered(seed, eta, c1, c2):
    p = StorageParams.from_physical(c1=c1, c2=c2, eta=eta, e_min=0.1, e_max=1.9, e0=1.0, p_max=0.5)
    prices = np.random.default_rng(seed).uniform(0, 100, 24)
    y = solve_qp(storage.assemble(p, prices), TIGHT).y_star
    assert storage.is_feasible(p, y, tol=1e-6)
    phys = storage.recover_physical(p)
    assert phys["e_min"] == pytest.approx(0.1)
    assert phys["e_max"] == pytest.approx(1.9)
    assert phys["eta"] == pytest.approx(eta)


def _loss(params, prices, w):
    return w @ solve_qp(storage.assemble(params, prices), TIGHT).y_star


def test_constraint_grads_match_finite_differences():
    rng = np.random.default_rng(3)
    p = StorageParams(c1=4.0, c2=3.0, eta_sq=0.88, e_min_shift=-0.7, e_max_shift=0.6, p_max=0.5, T=12)
    prices = rng.uniform(10, 80, 12)
    w = rng.normal(size=24)
    prob = storage.assemble(p, prices)
    sol = solve_qp(prob, TIGHT)
    g = backward(factor_kkt(prob, sol), prob, sol, w)
    got = storage.constraint_grads(p, g.dG, g.dh)
    np.testing.assert_allclose(storage.scalar_grads(p, g.dQ, g.dq, g.dG, g.dh)[2:], got)
    vec = p.learned_vector()
    for k, j in enumerate(range(2, 5)):
        e = np.zeros(5)
        e[j] = 1e-6
        num = (_loss(p.with_learned(vec + e), prices, w) - _loss(p.with_learned(vec - e), prices, w)) / 2e-6
        assert got[k] == pytest.approx(num, rel=1e-4, abs=1e-6)


def test_cost_scalar_grads_match_finite_differences():
    rng = np.random.default_rng(4)
    p = quad(T=12)
    prices = rng.uniform(10, 80, 12)
    w = rng.normal(size=24)
    prob = storage.assemble(p, prices)
    sol = solve_qp(prob, TIGHT)
    g = backward(factor_kkt(prob, sol), prob, sol, w)
    got = storage.scalar_grads(p, g.dQ, g.dq, g.dG, g.dh)
    vec = p.learned_vector()
    for j in range(2):
        e = np.zeros(5)
        e[j] = 1e-6
        num = (_loss(p.with_learned(vec + e), prices, w) - _loss(p.with_learned(vec - e), prices, w)) / 2e-6
        assert got[j] == pytest.approx(num, rel=1e-4, abs=1e-6)


def test_soc_cost_value_matches_qp_objective():
    p = SocCostParams(c1=3.0, c2=1.0, eta_sq=0.9, e_min_shift=-0.4, e_max_shift=0.8, p_max=0.5, T=6)
    Q, q = storage.soc_cost(p)
    y = np.random.default_rng(0).uniform(0, 0.5, 12)
    width = p.e_max_shift - p.e_min_shift
    mid = 0.5 * (p.e_max_shift + p.e_min_shift)
    const = p.c1 * p.T * (mid / width) ** 2
    assert storage.soc_cost_value(p, y)[0] == pytest.approx(y @ Q @ y + q @ y + const)
