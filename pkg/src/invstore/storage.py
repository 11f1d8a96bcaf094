"""Storage agent models expressed as canonical QPs.

Decision vector ``y = [p_1..p_T, d_1..d_T]`` (charge, discharge in MW).  The
energy constraint is kept in its reformulated linear form::

    e_min_shift <= dt * sum_{tau<=t} (eta_sq * p_tau - d_tau) <= e_max_shift

where ``eta_sq`` is the round-trip efficiency and the shifted bounds are
``(E - e0) * eta`` for the raw SoC limits ``E``.  With symmetric charge and
discharge efficiencies the raw values are recoverable, see
:func:`recover_physical`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import DimensionMismatch
from .qp import QpProblem

LEARNED = ("c1", "c2", "eta_sq", "e_min_shift", "e_max_shift")


@dataclass
class StorageParams:
    """Parameters of the quadratic-degradation agent.

    ``c1`` ($/MWh) and ``c2`` ($/MWh^2) price discharge throughput as
    ``c1 * d + c2 * d**2``.
    """

    c1: float
    c2: float
    eta_sq: float
    e_min_shift: float
    e_max_shift: float
    p_max: float
    p_min: float = 0.0
    e0: float = 0.0
    T: int = 24
    dt: float = 1.0

    model = "quadratic"

    def __post_init__(self):
        self.T = int(self.T)
        for f in fields(self):
            if f.name != "T":
                setattr(self, f.name, float(getattr(self, f.name)))

    @property
    def eta(self) -> float:
        return float(np.sqrt(self.eta_sq))

    def validate(self):
        if not 0.0 < self.eta_sq <= 1.0:
            raise ValueError(f"eta_sq must lie in (0, 1], got {self.eta_sq}")
        if self.p_min > self.p_max:
            raise ValueError("p_min > p_max")
        if self.e_min_shift >= self.e_max_shift:
            raise ValueError("e_min_shift must be below e_max_shift")
        if self.c2 < 0:
            raise ValueError("c2 must be nonnegative")
        if self.T < 1:
            raise ValueError("T must be positive")
        return self

    def learned_vector(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in LEARNED])

    def with_learned(self, vec) -> "StorageParams":
        kw = asdict(self)
        kw.update(zip(LEARNED, map(float, vec)))
        return type(self)(**kw)

    def to_dict(self) -> dict:
        return {"model": self.model, **asdict(self)}

    @classmethod
    def from_physical(cls, c1, c2, eta, e_min, e_max, e0, p_max, p_min=0.0, T=24, dt=1.0):
        """Build from raw SoC limits (MWh) and a symmetric one-way efficiency."""
        return cls(c1=c1, c2=c2, eta_sq=eta ** 2, e_min_shift=(e_min - e0) * eta,
                   e_max_shift=(e_max - e0) * eta, p_max=p_max, p_min=p_min, e0=e0, T=T, dt=dt)


@dataclass
class SocCostParams(StorageParams):
    """SoC-dependent degradation ``c1 * (soc_t - 0.5)**2 + c2 * d_t**2``.

    ``soc_t`` is the state of charge as a fraction of the usable range, so
    ``c1`` is in $ per squared fraction.
    """

    model = "soc"

    def validate(self):
        super().validate()
        if self.c1 < 0:
            raise ValueError("c1 must be nonnegative")
        return self


def cumulative_operator(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T)))


def energy_operator(params: StorageParams) -> np.ndarray:
    """Matrix mapping ``y`` to ``dt * cumsum(eta_sq * p - d)``."""
    L = cumulative_operator(params.T) * params.dt
    return np.hstack([params.eta_sq * L, -L])


def constraints(params: StorageParams):
    """Inequalities ``G y <= h``: 4T power rows then 2T energy rows."""
    T = params.T
    eye = np.eye(2 * T)
    E = energy_operator(params)
    G = np.vstack([-eye, eye, E, -E])
    h = np.concatenate([
        np.full(2 * T, -params.p_min),
        np.full(2 * T, params.p_max),
        np.full(T, params.e_max_shift),
        np.full(T, -params.e_min_shift),
    ])
    return G, h


def signed_prices(prices) -> np.ndarray:
    prices = np.asarray(prices, dtype=float)
    return np.concatenate([prices, -prices], axis=-1)


def _check_prices(params, prices):
    prices = np.asarray(prices, dtype=float).reshape(-1)
    if prices.shape != (params.T,):
        raise DimensionMismatch(f"expected {params.T} prices, got {prices.shape[0]}")
    return prices


def quadratic_cost(params: StorageParams):
    T = params.T
    Q = np.diag(np.concatenate([np.zeros(T), np.full(T, params.c2)]))
    q = np.concatenate([np.zeros(T), np.full(T, params.c1)])
    return Q, q


def soc_cost(params: SocCostParams):
    """Expand ``c1 * ||(E y - mid) / width||^2 + c2 ||d||^2`` into (Q, q)."""
    T = params.T
    width = params.e_max_shift - params.e_min_shift
    mid = 0.5 * (params.e_max_shift + params.e_min_shift)
    M = energy_operator(params) / width
    k = -mid / width * np.ones(T)
    Q = params.c1 * M.T @ M
    Q[T:, T:] += params.c2 * np.eye(T)
    q = 2.0 * params.c1 * M.T @ k
    return Q, q


def assemble_quadratic(params: StorageParams, prices) -> QpProblem:
    prices = _check_prices(params, prices)
    Q, q = quadratic_cost(params)
    G, h = constraints(params)
    return QpProblem(Q=Q, q=q, lam=signed_prices(prices), G=G, h=h)


def assemble_soc(params: SocCostParams, prices) -> QpProblem:
    prices = _check_prices(params, prices)
    Q, q = soc_cost(params)
    G, h = constraints(params)
    return QpProblem(Q=Q, q=q, lam=signed_prices(prices), G=G, h=h)


def assemble(params: StorageParams, prices) -> QpProblem:
    if isinstance(params, SocCostParams):
        return assemble_soc(params, prices)
    return assemble_quadratic(params, prices)


def soc_cost_value(params: SocCostParams, y) -> np.ndarray:
    """Disutility of ``y`` (rows) under the SoC model, without the constant term."""
    y = np.atleast_2d(y)
    width = params.e_max_shift - params.e_min_shift
    mid = 0.5 * (params.e_max_shift + params.e_min_shift)
    frac = (y @ energy_operator(params).T - mid) / width
    d = y[:, params.T:]
    return params.c1 * (frac ** 2).sum(axis=1) + params.c2 * (d ** 2).sum(axis=1)


def scalar_grads(params: StorageParams, dQ, dq, dG, dh) -> np.ndarray:
    """Chain per-entry QP gradients onto the learned scalars.

    Returns ``dL/d[c1, c2, eta_sq, e_min_shift, e_max_shift]`` for the
    quadratic model.  Inputs may carry a leading batch axis; it is summed.
    """
    T = params.T
    dQ, dq, dG, dh = (np.asarray(a) for a in (dQ, dq, dG, dh))
    if dq.ndim == 2:
        dQ, dq, dG, dh = dQ.sum(0), dq.sum(0), dG.sum(0), dh.sum(0)
    L = cumulative_operator(T) * params.dt
    up, lo = slice(4 * T, 5 * T), slice(5 * T, 6 * T)
    g_c1 = dq[T:].sum()
    g_c2 = np.trace(dQ[T:, T:])
    g_eta = (dG[up, :T] * L).sum() - (dG[lo, :T] * L).sum()
    g_emax = dh[up].sum()
    g_emin = -dh[lo].sum()
    return np.array([g_c1, g_c2, g_eta, g_emin, g_emax])


def constraint_grads(params: StorageParams, dG, dh) -> np.ndarray:
    """``dL/d[eta_sq, e_min_shift, e_max_shift]`` through ``(G, h)`` only.

    For :class:`SocCostParams` the cost also depends on these scalars, so this
    is a partial derivative there.
    """
    T = params.T
    dG, dh = np.asarray(dG), np.asarray(dh)
    if dh.ndim == 2:
        dG, dh = dG.sum(0), dh.sum(0)
    L = cumulative_operator(T) * params.dt
    up, lo = slice(4 * T, 5 * T), slice(5 * T, 6 * T)
    return np.array([
        (dG[up, :T] * L).sum() - (dG[lo, :T] * L).sum(),
        -dh[lo].sum(),
        dh[up].sum(),
    ])


def recover_physical(params: StorageParams) -> dict:
    """Undo the reformulation assuming symmetric efficiencies."""
    eta = params.eta
    return {
        "eta": eta,
        "e_min": params.e0 + params.e_min_shift / eta,
        "e_max": params.e0 + params.e_max_shift / eta,
        "c1": params.c1,
        "c2": params.c2,
        "p_min": params.p_min,
        "p_max": params.p_max,
    }


def soc_trajectory(params: StorageParams, y) -> np.ndarray:
    """Raw state of charge e_t (MWh) for dispatch ``y``."""
    y = np.asarray(y, dtype=float)
    eta = params.eta
    p, d = y[..., :params.T], y[..., params.T:]
    return params.e0 + np.cumsum(eta * p - d / eta, axis=-1) * params.dt


def is_feasible(params: StorageParams, y, tol=1e-7) -> bool:
    """Direct check of power and SoC limits, independent of the QP matrices."""
    y = np.asarray(y, dtype=float)
    T = params.T
    p, d = y[:T], y[T:]
    phys = recover_physical(params)
    e = soc_trajectory(params, y)
    return bool(
        (p >= params.p_min - tol).all() and (p <= params.p_max + tol).all()
        and (d >= params.p_min - tol).all() and (d <= params.p_max + tol).all()
        and (e >= phys["e_min"] - tol).all() and (e <= phys["e_max"] + tol).all()
    )
