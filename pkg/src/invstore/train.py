"""Parameter identification by differentiating through the agent's optimisation.

Three trainers share one loop shape (forward solve, adjoint backward,
optimiser step, projection, random restarts):

* :func:`train_quadratic` learns ``[c1, c2, eta_sq, e_min_shift, e_max_shift]``.
* :func:`train_generic` learns an input-convex disutility plus the constraint
  scalars, with SCP forward solves.
* :func:`train_equality` learns ``(alpha, b)`` of the equality-only agent with
  plain gradient steps.

The loss is ``mean_i ||y*_i - y_i||^2`` over the batch.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .data import Dataset, EqualityData
from .errors import DimensionMismatch, DivergedLoss, NonOptimalForward
from .icnn import IcnnModel
from .kkt import backward_batch
from .qp import SolverSettings, solve_batch
from .scp import scp_solve
from .storage import (StorageParams, assemble, constraint_grads, constraints, scalar_grads,
                      signed_prices)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    optimizer: str = "adam"          # "adam" or "gd"
    lr_schedule: str = "cosine"      # "cosine" or "constant"
    batch_size: int = 32
    full_batch_max: int = 40
    max_epochs: int | None = None    # None: 500 quadratic, 300 generic, 2000 equality
    restarts: int = 5
    seed: int = 0
    loss_tol: float | None = None    # None: 1e-9, or 1e-20 in the equality regime
    c_range: tuple = (0.0, 20.0)
    eta_range: tuple = (0.8, 1.0)
    eta_sq_bounds: tuple = (0.5, 1.0)
    c2_min: float = 1e-6
    bound_gap: float = 1e-6
    p_max: float | None = None       # None: inferred from the data
    p_min: float = 0.0
    qp_tol: float = 1e-8
    qp_max_iter: int = 100
    qp_reg: float = 1e-8
    scp_max_iter: int = 20
    scp_tol: float = 1e-6
    warm_start: bool = True
    icnn_mode: str = "scalar"
    hidden: tuple = (24, 24)
    init_range: float = 0.1
    grad_fd_check: bool = False
    eval_every: int = 1
    max_skip_frac: float = 0.1
    divergence_factor: float = 1e3
    smoothing: float = 0.0           # generic trainer: initial barrier, in units of mean|price| * p_max
    smoothing_frac: float = 0.7      # fraction of the epochs over which the barrier anneals to zero

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if self.optimizer not in ("adam", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        for name in ("c_range", "eta_range", "eta_sq_bounds", "hidden"):
            setattr(self, name, tuple(getattr(self, name)))

    @property
    def settings(self) -> SolverSettings:
        return SolverSettings(tol=self.qp_tol, max_iter=self.qp_max_iter, reg=self.qp_reg)

    def epochs(self, kind: str) -> int:
        if self.max_epochs is not None:
            return int(self.max_epochs)
        return {"quadratic": 500, "generic": 300, "equality": 2000}[kind]

    def tol(self, kind: str) -> float:
        if self.loss_tol is not None:
            return self.loss_tol
        return 1e-20 if kind == "equality" else 1e-9

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class GenericModel:
    """Learned convex disutility plus the storage constraint scalars."""

    network: IcnnModel
    storage: StorageParams
    c1: float | None = None
    c2: float | None = None
    model = "generic"


@dataclass
class EqualityModel:
    alpha: float
    b: np.ndarray
    A: np.ndarray
    model = "equality"


@dataclass
class TrainReport:
    model: object
    train_loss: list
    test_mse: list = field(default_factory=list)   # (epoch, mse) pairs for the chosen restart
    best_restart: int = 0
    restart_losses: list = field(default_factory=list)
    wall_clock: float = 0.0
    grad_audit: float | None = None
    skipped: int = 0
    scp_unconverged: int = 0
    epochs_run: int = 0
    history: list = field(default_factory=list, repr=False)


class Adam:
    """Adaptive moments over a dict of arrays (updates in place)."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + self.eps)


def trainer_rng(seed) -> np.random.Generator:
    """Random stream for initialisation, kept apart from ``default_rng(seed)``.

    Data synthesis uses ``default_rng(seed)`` too; sharing it would make the
    first random restart replay the ground-truth draw for equal seeds.
    """
    return np.random.default_rng([int(seed), 0x1D])


def _lr(config: TrainConfig, epoch: int, n_epochs: int) -> float:
    if config.lr_schedule == "cosine" and n_epochs > 1:
        return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / n_epochs))
    return config.learning_rate


def _batches(rng, N, config: TrainConfig):
    if N <= config.full_batch_max:
        return [np.arange(N)]
    perm = rng.permutation(N)
    return [perm[i:i + config.batch_size] for i in range(0, N, config.batch_size)]


# ------------------------------------------------------------------ metrics

def net_dispatch(y, T=None) -> np.ndarray:
    """Signed net dispatch ``p - d`` (charging positive)."""
    y = np.atleast_2d(y)
    T = y.shape[1] // 2 if T is None else T
    return y[:, :T] - y[:, T:]


def correlation(x, y) -> float | None:
    """Pearson correlation of two flattened sequences; ``None`` if either is constant."""
    x = np.ravel(x).astype(float)
    y = np.ravel(y).astype(float)
    dx, dy = x - x.mean(), y - y.mean()
    den = math.sqrt((dx * dx).sum() * (dy * dy).sum())
    if den == 0.0:
        warnings.warn("correlation undefined for a constant sequence", RuntimeWarning)
        return None
    return float((dx * dy).sum() / den)


def evaluate(forecast, observed) -> dict:
    """MSE over the net-dispatch sequence and its correlation with the observation."""
    f = np.asarray(forecast, dtype=float)
    o = np.asarray(observed, dtype=float)
    if f.shape != o.shape:
        raise DimensionMismatch(f"forecast shape {f.shape} != observed shape {o.shape}")
    if f.ndim == 2 and f.shape[1] % 2 == 0 and f.shape[1] >= 2:
        f, o = net_dispatch(f), net_dispatch(o)
    if f.size < 2:
        raise DimensionMismatch("need at least two values to evaluate")
    return {"mse": float(np.mean((f - o) ** 2)), "correlation": correlation(f, o)}


# ------------------------------------------------------------------ helpers

def infer_power_bounds(data: Dataset, config: TrainConfig):
    p_max = config.p_max if config.p_max is not None else float(data.responses.max())
    if p_max <= 0:
        raise ValueError("cannot infer p_max from an all-idle dataset; set p_max in the config")
    return p_max, config.p_min


def _energy_envelope(data: Dataset, eta_sq: float):
    L = np.tril(np.ones((data.T, data.T))) * data.dt
    E = data.charge @ L.T * eta_sq - data.discharge @ L.T
    return min(float(E.min()), 0.0), max(float(E.max()), 0.0)


def _template(data: Dataset, config: TrainConfig) -> StorageParams:
    p_max, p_min = infer_power_bounds(data, config)
    e0 = float(data.metadata.get("truth", {}).get("e0", 0.0)) if isinstance(data.metadata, dict) else 0.0
    return StorageParams(c1=0.0, c2=1.0, eta_sq=1.0, e_min_shift=-1.0, e_max_shift=1.0,
               p_max=p_max, p_min=p_min, e0=e0, T=data.T, dt=data.dt)


def _random_scalars(rng, data: Dataset, config: TrainConfig):
    c1, c2 = rng.uniform(*config.c_range, size=2)
    eta_sq = float(np.clip(rng.uniform(*config.eta_range) ** 2, *config.eta_sq_bounds))
    lo, hi = _energy_envelope(data, eta_sq)
    if hi - lo < config.bound_gap:
        hi = lo + max(config.bound_gap, 1e-3)
    return np.array([c1, c2, eta_sq, lo, hi])


def project_scalars(vec, config: TrainConfig) -> np.ndarray:
    """Map ``[c1, c2, eta_sq, e_min, e_max]`` back into the admissible set."""
    c1, c2, eta_sq, lo, hi = (float(v) for v in vec)
    c1 = max(c1, 0.0)
    c2 = max(c2, config.c2_min)
    eta_sq = min(max(eta_sq, config.eta_sq_bounds[0]), config.eta_sq_bounds[1])
    lo = min(lo, 0.0)
    hi = max(hi, 0.0)
    if hi - lo < config.bound_gap:
        mid = 0.5 * (hi + lo)
        lo, hi = mid - config.bound_gap, mid + config.bound_gap
        lo, hi = min(lo, 0.0), max(hi, 0.0)
    return np.array([c1, c2, eta_sq, lo, hi])


def _scales(data: Dataset, p_max: float, config: TrainConfig) -> np.ndarray:
    c = max(config.c_range[1] - config.c_range[0], 1.0)
    e = max(p_max * data.dt * data.T / 4.0, 1e-3)
    return np.array([c, c, 0.5, e, e])


def _check_skips(ok, N, config):
    skipped = int((~ok).sum())
    if skipped:
        warnings.warn(f"{skipped} forward solve(s) not optimal; skipped in this step", RuntimeWarning)
        if skipped > config.max_skip_frac * N:
            raise NonOptimalForward(f"{skipped} of {N} forward solves failed")
    return skipped


# ------------------------------------------------------------------ quadratic

def _forward_storage(params: StorageParams, prices, settings):
    prob = assemble(params, prices[0])
    sol = solve_batch(prob.Q, signed_prices(prices) + prob.q, None, None, prob.G, prob.h, settings)
    return prob, sol


def quadratic_loss_grad(params: StorageParams, data: Dataset, settings: SolverSettings,
                        idx=None, with_grad=True):
    """Loss, gradient with respect to the learned scalars, predictions and optimality mask."""
    idx = np.arange(len(data)) if idx is None else idx
    prices, target = data.prices[idx], data.responses[idx]
    prob, sol = _forward_storage(params, prices, settings)
    ok = sol.optimal
    N = len(idx)
    diff = np.where(ok[:, None], sol.y - target, 0.0)
    loss = float((diff ** 2).sum() / max(ok.sum(), 1))
    if not with_grad:
        return loss, None, sol.y, ok
    g = backward_batch(prob.Q, None, prob.G, prob.h, sol.y, sol.mu, sol.nu, sol.slack, sol.reg,
                       2.0 * diff / max(ok.sum(), 1))
    return loss, scalar_grads(params, g.dQ, g.dq, g.dG, g.dh), sol.y, ok


def train_quadratic(data: Dataset, config: TrainConfig | None = None,
                    test: Dataset | None = None) -> TrainReport:
    """Identify the quadratic-degradation agent with random-shooting restarts."""
    config = config or TrainConfig()
    if len(data) == 0:
        raise ValueError("empty dataset")
    t0 = time.perf_counter()
    rng = trainer_rng(config.seed)
    template = _template(data, config)
    settings = config.settings
    n_epochs = config.epochs("quadratic")
    scales = _scales(data, template.p_max, config)
    runs = []
    audit = None
    for r in range(config.restarts):
        vec = project_scalars(_random_scalars(rng, data, config), config)
        params = template.with_learned(vec)
        if config.grad_fd_check and r == 0:
            audit = audit_quadratic(params, data)
        opt = Adam()
        history = [vec.copy()]
        losses = []
        skipped = 0
        init_loss = None
        for epoch in range(n_epochs):
            lr = _lr(config, epoch, n_epochs)
            ep_loss = 0.0
            for idx in _batches(rng, len(data), config):
                loss, grad, _, ok = quadratic_loss_grad(params, data, settings, idx)
                skipped += _check_skips(ok, len(idx), config)
                ep_loss += loss * len(idx) / len(data)
                phi = {"x": vec / scales}
                opt.step(phi, {"x": grad * scales}, lr)
                vec = project_scalars(phi["x"] * scales, config)
                params = template.with_learned(vec)
            init_loss = ep_loss if init_loss is None else init_loss
            losses.append(ep_loss)
            history.append(vec.copy())
            if ep_loss > config.divergence_factor * max(init_loss, 1e-12):
                raise DivergedLoss(f"loss {ep_loss:.3g} exceeded {config.divergence_factor:g}x its start")
            if ep_loss < config.tol("quadratic"):
                break
        final, _, _, _ = quadratic_loss_grad(params, data, settings, with_grad=False)
        runs.append(dict(params=params, losses=losses, final=final, history=history, skipped=skipped))
        log.info("restart %d: final loss %.3e", r, final)

    best = int(np.argmin([run["final"] for run in runs]))
    chosen = runs[best]
    report = TrainReport(model=chosen["params"], train_loss=chosen["losses"], best_restart=best,
                         restart_losses=[run["final"] for run in runs], grad_audit=audit,
                         skipped=chosen["skipped"], epochs_run=len(chosen["losses"]),
                         history=chosen["history"])
    if test is not None and len(test):
        report.test_mse = _test_curve(
            lambda v: predict(template.with_learned(v), test.prices, settings),
            chosen["history"], test, config.eval_every)
    report.wall_clock = time.perf_counter() - t0
    return report


def _test_curve(forecast, history, test: Dataset, every: int):
    """Test MSE along a parameter history: every ``every`` epochs plus the final one."""
    n = len(history) - 1
    epochs = sorted(set(range(0, n + 1, max(every, 1))) | {n})
    return [(e, evaluate(forecast(history[e]), test.responses)["mse"]) for e in epochs]


def audit_quadratic(params: StorageParams, data: Dataset, step=1e-5, idx=None) -> float:
    """Max relative error between the analytic scalar gradient and central differences."""
    settings = SolverSettings(tol=1e-11)
    _, grad, _, _ = quadratic_loss_grad(params, data, settings, idx)
    vec = params.learned_vector()
    fd = np.zeros_like(vec)
    for j in range(vec.size):
        h = step * max(1.0, abs(vec[j]))
        vp, vm = vec.copy(), vec.copy()
        vp[j] += h
        vm[j] -= h
        lp = quadratic_loss_grad(params.with_learned(vp), data, settings, idx, with_grad=False)[0]
        lm = quadratic_loss_grad(params.with_learned(vm), data, settings, idx, with_grad=False)[0]
        fd[j] = (lp - lm) / (2 * h)
    return relative_error(grad, fd)


def relative_error(analytic, numeric) -> float:
    """``||a - n||_inf / ||n||_inf`` (absolute when the reference is ~0)."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    ref = np.abs(n).max(initial=0.0)
    return float(np.abs(a - n).max(initial=0.0) / (ref if ref > 1e-12 else 1.0))


# ------------------------------------------------------------------ generic

def _generic_forward(model: GenericModel, prices, config: TrainConfig, y_init=None, settings=None,
                     fp_tol=None):
    G, h = constraints(model.storage)
    return scp_solve(model.network, G, h, signed_prices(prices), y_init=y_init,
                     fp_tol=config.scp_tol if fp_tol is None else fp_tol,
                     max_iters=config.scp_max_iter, settings=settings or config.settings)


def generic_loss_grad(model: GenericModel, data: Dataset, config: TrainConfig, idx=None,
                      y_init=None, with_grad=True, settings=None, fp_tol=None):
    """Loss and gradients (network weights, ``[eta_sq, e_min, e_max]``) through SCP."""
    idx = np.arange(len(data)) if idx is None else idx
    target = data.responses[idx]
    res = _generic_forward(model, data.prices[idx], config, y_init, settings, fp_tol)
    sol = res.solution
    ok = sol.optimal
    n_ok = max(ok.sum(), 1)
    # the final QP solve is the point the adjoint differentiates
    diff = np.where(ok[:, None], sol.y - target, 0.0)
    loss = float((diff ** 2).sum() / n_ok)
    if not with_grad:
        return loss, None, None, res, ok
    G, h = constraints(model.storage)
    smooth = (settings or config.settings).barrier > 0
    g = backward_batch(res.Q_hat, None, G, h, sol.y, sol.mu, sol.nu, sol.slack, sol.reg,
                       2.0 * diff / n_ok, smooth=smooth)
    z = g.dq
    GH = 0.5 * g.dQ - z[:, :, None] * res.center[:, None, :]
    net_grads = model.network.backward_params(res.center, z, GH)
    scal = constraint_grads(model.storage, g.dG, g.dh)
    return loss, net_grads, scal, res, ok


def _network_scales(data: Dataset, p_max: float):
    price = float(np.abs(data.prices).mean()) if data.prices.size else 1.0
    return p_max, max(price * p_max, 1e-6)


def init_generic(rng, data: Dataset, config: TrainConfig, prefit_steps=400,
                 start: StorageParams | None = None) -> GenericModel:
    """Random start: small uniform weights pre-fitted to a random quadratic disutility.

    A nearly flat network puts every forward solve on a vertex of the
    constraint polytope, where the dispatch does not react to the cost and the
    network gradient is exactly zero.  Fitting it first to ``c1 d + c2 d^2``
    with ``(c1, c2)`` drawn like the quadratic trainer's start avoids that.
    """
    template = _template(data, config)
    vec = _random_scalars(rng, data, config) if start is None else start.learned_vector()
    vec = project_scalars(vec, config)
    in_s, out_s = _network_scales(data, template.p_max)
    net = IcnnModel.random(rng, data.T, config.icnn_mode, config.hidden, config.init_range, in_s, out_s,
                           dt=data.dt)
    fit_quadratic(net, vec[0], vec[1], template.p_max, rng, steps=prefit_steps, near=data.responses)
    return GenericModel(network=net, storage=template.with_learned(vec))


def fit_quadratic(net: IcnnModel, c1, c2, p_max, rng, steps=400, lr=0.02, n_points=32, near=None):
    """Match the network's gradient and Hessian to those of ``sum_t c1 d_t + c2 d_t^2``.

    Scalar networks are fitted on a grid of ``d``.  Other modes use random
    dispatches, drawn around the rows of ``near`` when given.
    """
    T = net.T
    if net.mode == "scalar":
        y = np.zeros((n_points, 2 * T))
        y[:, T:] = np.linspace(0.0, p_max, n_points)[:, None]
    elif near is not None and len(near):
        base = np.atleast_2d(near)[rng.integers(len(near), size=n_points)]
        y = np.clip(base + rng.uniform(-0.25, 0.25, size=base.shape) * p_max, 0.0, p_max)
    else:
        y = rng.uniform(0.0, p_max, size=(n_points, 2 * T))
    g_t = np.zeros_like(y)
    g_t[:, T:] = c1 + 2.0 * c2 * y[:, T:]
    H_t = np.zeros((n_points, 2 * T, 2 * T))
    idx = np.arange(T, 2 * T)
    H_t[:, idx, idx] = 2.0 * c2
    wg = 1.0 / max(abs(c1) + 2.0 * abs(c2) * p_max, 1.0) ** 2
    wh = 1.0 / max(2.0 * abs(c2), 1.0) ** 2
    opt = Adam()
    for k in range(steps):
        g, H = net.grad_hess(y)
        grads = net.backward_params(y, 2.0 * wg * (g - g_t) / n_points, 2.0 * wh * (H - H_t) / n_points)
        opt.step(net.params, grads, lr * 0.5 * (1.0 + math.cos(math.pi * k / steps)))
        net.project()
    return net


def extract_linear_quadratic(model: GenericModel, y) -> tuple:
    """Equivalent ``(c1, c2)`` of the learned disutility along the discharge coordinates.

    For ``u = c1 d + c2 d^2`` per step, ``c2 = u''/2`` and ``c1 = u' - u'' d``;
    both are averaged over the discharge coordinates of the given dispatches.
    """
    y = np.atleast_2d(y)
    T = model.network.T
    g, H = model.network.grad_hess(y)
    idx = np.arange(T, 2 * T)
    gd, hd, d = g[:, idx], H[:, idx, idx], y[:, idx]
    return float(np.mean(gd - hd * d)), float(0.5 * np.mean(hd))


def train_generic(data: Dataset, config: TrainConfig | None = None, test: Dataset | None = None,
                  start: StorageParams | None = None) -> TrainReport:
    """Identify an input-convex disutility and the constraint scalars.

    ``start`` (typically a quadratic identification) seeds the first restart:
    its constraint scalars are reused and the network is pre-fitted to its
    ``(c1, c2)``.  Later restarts are random.
    """
    config = config or TrainConfig()
    if len(data) == 0:
        raise ValueError("empty dataset")
    t0 = time.perf_counter()
    rng = trainer_rng(config.seed)
    n_epochs = config.epochs("generic")
    runs = []
    audit = None
    for r in range(config.restarts):
        model = init_generic(rng, data, config, start=start if r == 0 else None)
        scales = _scales(data, model.storage.p_max, config)[2:]
        if config.grad_fd_check and r == 0:
            audit = audit_generic(model, data, idx=np.arange(min(len(data), 2)))
        opt = Adam()
        y_warm = np.zeros_like(data.responses)
        losses, history = [], [_snapshot(model)]
        skipped = unconverged = 0
        init_loss = None
        tau0 = config.smoothing * model.network.output_scale
        for epoch in range(n_epochs):
            lr = _lr(config, epoch, n_epochs)
            tau = tau0 * max(0.0, 1.0 - epoch / max(config.smoothing_frac * n_epochs, 1.0))
            settings = replace(config.settings, barrier=tau)
            ep_loss = 0.0
            for idx in _batches(rng, len(data), config):
                y0 = y_warm[idx] if config.warm_start else None
                loss, gnet, gscal, res, ok = generic_loss_grad(model, data, config, idx, y0,
                                                               settings=settings)
                skipped += _check_skips(ok, len(idx), config)
                unconverged += int((~res.converged).sum())
                y_warm[idx] = np.where(ok[:, None], res.y, 0.0)
                ep_loss += loss * len(idx) / len(data)
                params = dict(model.network.params)
                vec = model.storage.learned_vector()
                params["scalars"] = vec[2:] / scales
                grads = dict(gnet)
                grads["scalars"] = gscal * scales
                opt.step(params, grads, lr)
                full = project_scalars(np.concatenate([vec[:2], params.pop("scalars") * scales]), config)
                model.network.params = params
                model.network.project()
                model.storage = model.storage.with_learned(full)
            init_loss = ep_loss if init_loss is None else init_loss
            losses.append(ep_loss)
            history.append(_snapshot(model))
            if ep_loss > config.divergence_factor * max(init_loss, 1e-12):
                raise DivergedLoss(f"loss {ep_loss:.3g} exceeded {config.divergence_factor:g}x its start")
            if ep_loss < config.tol("generic"):
                break
        final = generic_loss_grad(model, data, config, with_grad=False)[0]
        runs.append(dict(model=model, losses=losses, final=final, history=history,
                         skipped=skipped, unconverged=unconverged))
        log.info("restart %d: final loss %.3e", r, final)

    best = int(np.argmin([run["final"] for run in runs]))
    chosen = runs[best]
    model = chosen["model"]
    model.c1, model.c2 = extract_linear_quadratic(model, data.responses)
    model.storage = model.storage.with_learned(
        np.concatenate([[model.c1, max(model.c2, 0.0)], model.storage.learned_vector()[2:]]))
    report = TrainReport(model=model, train_loss=chosen["losses"], best_restart=best,
                         restart_losses=[run["final"] for run in runs], grad_audit=audit,
                         skipped=chosen["skipped"], scp_unconverged=chosen["unconverged"],
                         epochs_run=len(chosen["losses"]), history=chosen["history"])
    if test is not None and len(test):
        report.test_mse = _test_curve(
            lambda snap: predict(_restore(model, snap), test.prices, config.settings, config),
            chosen["history"], test, config.eval_every)
    report.wall_clock = time.perf_counter() - t0
    return report


def _snapshot(model: GenericModel):
    return ({k: v.copy() for k, v in model.network.params.items()}, model.storage.learned_vector())


def _restore(model: GenericModel, snap) -> GenericModel:
    params, vec = snap
    net = model.network.copy()
    net.params = {k: v.copy() for k, v in params.items()}
    return GenericModel(network=net, storage=model.storage.with_learned(vec))


def audit_generic(model: GenericModel, data: Dataset, idx=None, step=1e-5, n_weights=12, seed=0) -> float:
    """Relative FD error of the generic-path gradient on a subset of weights and the scalars."""
    config = TrainConfig(qp_tol=1e-11, scp_tol=1e-11, scp_max_iter=60)
    settings = config.settings
    _, gnet, gscal, _, _ = generic_loss_grad(model, data, config, idx, settings=settings)

    def loss_at(m):
        return generic_loss_grad(m, data, config, idx, with_grad=False, settings=settings)[0]

    rng = np.random.default_rng(seed)
    analytic, numeric = [], []
    names = [k for k in model.network.params if k != "b2"]
    for _ in range(n_weights):
        name = names[rng.integers(len(names))]
        arr = model.network.params[name]
        pos = tuple(rng.integers(s) for s in arr.shape)
        vals = []
        for sgn in (1, -1):
            m = GenericModel(network=model.network.copy(), storage=model.storage)
            m.network.params[name][pos] += sgn * step
            vals.append(loss_at(m))
        analytic.append(gnet[name][pos])
        numeric.append((vals[0] - vals[1]) / (2 * step))
    vec = model.storage.learned_vector()
    for j in range(3):
        h = step * max(1.0, abs(vec[2 + j]))
        vals = []
        for sgn in (1, -1):
            v = vec.copy()
            v[2 + j] += sgn * h
            vals.append(loss_at(GenericModel(network=model.network, storage=model.storage.with_learned(v))))
        analytic.append(gscal[j])
        numeric.append((vals[0] - vals[1]) / (2 * h))
    return relative_error(analytic, numeric)


# ------------------------------------------------------------------ equality regime

def equality_loss_grad(alpha, b, data: EqualityData, settings=None):
    n = data.prices.shape[1]
    Q = 0.5 * alpha * np.eye(n)
    sol = solve_batch(Q, data.prices, data.A, b, None, None, settings or SolverSettings(tol=1e-12))
    if not sol.optimal.all():
        raise NonOptimalForward("equality-constrained forward solve failed")
    N = len(data.prices)
    diff = sol.y - data.responses
    loss = float((diff ** 2).sum() / N)
    g = backward_batch(Q, data.A, np.zeros((0, n)), np.zeros(0), sol.y, np.zeros((N, 0)), sol.nu,
                       np.zeros((N, 0)), sol.reg, 2.0 * diff / N)
    d_alpha = 0.5 * float(np.trace(g.dQ.sum(0)))
    return loss, d_alpha, g.db.sum(0)


def train_equality(data: EqualityData, config: TrainConfig | None = None, alpha0=None, b0=None,
                   alpha_min=1e-3) -> TrainReport:
    """Plain gradient descent on ``(alpha, b)`` with a backtracking step length."""
    config = config or TrainConfig(optimizer="gd", restarts=1)
    t0 = time.perf_counter()
    rng = trainer_rng(config.seed)
    m = data.A.shape[0]
    alpha = float(rng.uniform(0.5, 5.0) if alpha0 is None else alpha0)
    b = rng.normal(size=m) if b0 is None else np.array(b0, dtype=float)
    step = config.learning_rate
    loss, ga, gb = equality_loss_grad(alpha, b, data)
    losses = [loss]
    history = [(alpha, b.copy())]
    for _ in range(config.epochs("equality")):
        if loss < config.tol("equality"):
            break
        gnorm2 = ga * ga + float(gb @ gb)
        while True:
            a_new = max(alpha - step * ga, alpha_min)
            b_new = b - step * gb
            new = equality_loss_grad(a_new, b_new, data)
            if new[0] <= loss - 1e-4 * step * gnorm2 or step < 1e-14:
                break
            step *= 0.5
        alpha, b = a_new, b_new
        loss, ga, gb = new
        step *= 2.0
        losses.append(loss)
        history.append((alpha, b.copy()))
    return TrainReport(model=EqualityModel(alpha=alpha, b=b, A=data.A), train_loss=losses,
                       epochs_run=len(losses) - 1, history=history,
                       wall_clock=time.perf_counter() - t0)


# ------------------------------------------------------------------ prediction

def predict(model, prices, settings: SolverSettings | None = None, config: TrainConfig | None = None):
    """Forecast dispatch ``(N, 2T)`` (or ``(N, n)`` for the equality model) for each price row."""
    settings = settings or SolverSettings()
    prices = np.atleast_2d(np.asarray(prices, dtype=float))
    if isinstance(model, EqualityModel):
        n = model.A.shape[1]
        sol = solve_batch(0.5 * model.alpha * np.eye(n), prices, model.A, model.b, None, None, settings)
        y = sol.y
    elif isinstance(model, GenericModel):
        if prices.shape[1] != model.network.T:
            raise DimensionMismatch(f"expected {model.network.T} prices per row, got {prices.shape[1]}")
        res = _generic_forward(model, prices, config or TrainConfig(), settings=settings)
        sol, y = res.solution, res.y
    else:
        if prices.shape[1] != model.T:
            raise DimensionMismatch(f"expected {model.T} prices per row, got {prices.shape[1]}")
        _, sol = _forward_storage(model, prices, settings)
        y = sol.y
    if not sol.optimal.all():
        warnings.warn(f"{int((~sol.optimal).sum())} forecast solve(s) not optimal", RuntimeWarning)
    return y
