import numpy as np
import pytest
from hypothesis import given, strategies as st

from invstore import data, train
from invstore.errors import DimensionMismatch
from invstore.train import TrainConfig


@pytest.fixture(scope="module")
def small():
    tr, te, truth = data.generate_synthetic("quadratic", seed=7, n_train=4, n_test=2)
    return tr, te, truth


def test_metric_examples():
    with pytest.warns(RuntimeWarning):
        assert train.evaluate([1.0, 0.0], [0.0, 0.0])["mse"] == pytest.approx(0.5)
    x = np.array([1.0, 3.0, 2.0, 5.0])
    assert train.correlation(x, x) == pytest.approx(1.0)
    assert train.correlation(x, -x) == pytest.approx(-1.0)
    with pytest.warns(RuntimeWarning):
        assert train.correlation(np.ones(3), x[:3]) is None
    with pytest.raises(DimensionMismatch):
        train.evaluate([1.0], [1.0])


def test_evaluate_uses_net_dispatch():
    f = np.array([[1.0, 0.0, 0.0, 1.0]])   # net [1, -1]
    o = np.array([[0.5, 0.0, 0.0, 0.0]])   # net [0.5, 0]
    assert train.evaluate(f, o)["mse"] == pytest.approx((0.25 + 1.0) / 2)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(restarts=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})
    assert TrainConfig.from_dict(TrainConfig(seed=3).to_dict()) == TrainConfig(seed=3)


@given(st.lists(st.floats(-50, 50), min_size=5, max_size=5))
def test_projection_lands_in_admissible_set(vec):
    cfg = TrainConfig()
    c1, c2, eta_sq, lo, hi = train.project_scalars(vec, cfg)
    assert c1 >= 0 and c2 >= cfg.c2_min
    assert cfg.eta_sq_bounds[0] <= eta_sq <= cfg.eta_sq_bounds[1]
    assert lo <= 0 <= hi and hi - lo >= cfg.bound_gap - 1e-15


def test_trainer_rng_differs_from_data_rng():
    a = np.random.default_rng(7).uniform(size=3)
    b = train.trainer_rng(7).uniform(size=3)
    assert not np.allclose(a, b)


def test_zero_epoch_run_returns_initialisation(small):
    tr, _, _ = small
    cfg = TrainConfig(max_epochs=0, restarts=1, seed=1)
    rep = train.train_quadratic(tr, cfg)
    assert rep.train_loss == [] and rep.epochs_run == 0
    np.testing.assert_array_equal(rep.model.learned_vector(), rep.history[0])
    loss0 = train.quadratic_loss_grad(rep.model, tr, cfg.settings, with_grad=False)[0]
    assert rep.restart_losses == [loss0]


def test_quadratic_training_is_deterministic_and_descends(small):
    tr, te, _ = small
    cfg = TrainConfig(max_epochs=40, restarts=2, seed=2)
    a = train.train_quadratic(tr, cfg, te)
    b = train.train_quadratic(tr, cfg, te)
    assert a.train_loss == b.train_loss and a.test_mse == b.test_mse
    np.testing.assert_array_equal(a.model.learned_vector(), b.model.learned_vector())
    assert a.train_loss[-1] < a.train_loss[0]
    assert a.best_restart == int(np.argmin(a.restart_losses))
    assert a.test_mse[-1][0] == a.epochs_run


def test_quadratic_gradient_audit(small):
    tr, _, truth = small
    params = truth.with_learned(truth.learned_vector() * [1.3, 0.7, 0.95, 1.2, 0.8])
    params.p_max = truth.p_max
    assert train.audit_quadratic(params, tr, idx=np.arange(2)) <= 1e-4


def test_predict_with_truth_reproduces_simulator(small):
    _, te, truth = small
    a = train.predict(truth, te.prices)
    np.testing.assert_allclose(a, te.responses, atol=1e-6)
    np.testing.assert_array_equal(a, train.predict(truth, te.prices))
    with pytest.raises(DimensionMismatch):
        train.predict(truth, te.prices[:, :10])


def test_generic_short_run_keeps_invariants(small):
    tr, te, _ = small
    cfg = TrainConfig(max_epochs=3, restarts=1, hidden=(4, 4), seed=0, smoothing=0.01)
    rep = train.train_generic(tr.subset(slice(0, 2)), cfg, te)
    net = rep.model.network
    assert (net.params["U1"] >= 0).all() and (net.params["u2"] >= 0).all()
    assert np.isfinite(rep.train_loss).all() and len(rep.train_loss) == 3
    assert rep.model.c1 is not None and rep.model.c2 is not None
    y = train.predict(rep.model, te.prices, config=cfg)
    assert y.shape == te.responses.shape


def test_generic_gradient_audit(small):
    tr, _, _ = small
    cfg = TrainConfig(hidden=(6, 6), icnn_mode="soc")
    model = train.init_generic(train.trainer_rng(3), tr, cfg, prefit_steps=50)
    assert train.audit_generic(model, tr, idx=np.arange(1)) <= 1e-3


def test_equality_regime_converges():
    eq = data.generate_equality(seed=1, n_samples=10, n=6, m=2)
    rep = train.train_equality(eq, TrainConfig(optimizer="gd", restarts=1, seed=4))
    assert rep.train_loss[-1] <= 1e-8
    assert abs(rep.model.alpha - eq.alpha) <= 1e-4
    assert np.abs(rep.model.b - eq.b).max() <= 1e-4
    np.testing.assert_allclose(train.predict(rep.model, eq.prices), eq.responses, atol=1e-4)


def test_gradient_at_degenerate_energy_vertex():
    # full-storage plateau: energy rows and p/d bound rows are linearly dependent,
    # so dropped multipliers must be moved onto the kept rows
    tr, _, _ = data.generate_synthetic("quadratic", seed=7, n_train=20, n_test=10)
    cfg = TrainConfig()
    vec = np.array([4.12687823, 8.85451134, 0.73206553, -1.21335978, 0.7664507])
    params = train._template(tr, cfg).with_learned(vec)
    assert train.audit_quadratic(params, tr, idx=np.array([11, 9])) <= 1e-4
