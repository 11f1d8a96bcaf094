"""Sequential convex programming for agents with a learned convex disutility.

Each iteration replaces ``u`` by its second-order Taylor model at the current
iterate ``y_c`` and solves the resulting QP::

    min  lam'y + g'(y - y_c) + 1/2 (y - y_c)' H (y - y_c)   s.t.  G y <= h

In the canonical ``(lam + q)'y + y'Qy`` form this is ``Q = H / 2`` and
``q = g - H y_c``.  The iteration stops once ``||y_k - y_{k-1}||_inf <= fp_tol``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NotConverged
from .icnn import IcnnModel
from .qp import BatchSolution, SolverSettings, solve_batch

log = logging.getLogger(__name__)

FP_TOL = 1e-6
MAX_ITERS = 20
INCREASE_TOL = 1e-3


@dataclass
class ScpTrace:
    iterates: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    converged: bool = False
    k_final: int = 0
    halvings: int = 0

    @property
    def normalized(self) -> np.ndarray:
        """Objective trace divided by its starting value."""
        obj = np.asarray(self.objectives)
        return obj / obj[0] if obj.size and obj[0] != 0 else np.full(obj.shape, np.nan)

    def monotone(self, slack=1e-6) -> bool:
        obj = np.asarray(self.objectives)
        scale = 1.0 + np.abs(obj).max(initial=0.0)
        return bool((np.diff(obj) <= slack * scale).all())


@dataclass
class ScpResult:
    y: np.ndarray            # (N, n) fixed points
    solution: BatchSolution  # final QP solves
    Q_hat: np.ndarray        # (N, n, n) canonical curvature of the final model
    q_hat: np.ndarray        # (N, n) canonical linear term of the final model
    center: np.ndarray       # (N, n) Taylor centres of the final model
    traces: list
    converged: np.ndarray


def taylor_qp(model: IcnnModel, y_c):
    """Canonical ``(Q, q)`` of the second-order model of ``u`` around each row of ``y_c``."""
    g, H = model.grad_hess(y_c)
    return 0.5 * H, g - np.einsum("bij,bj->bi", H, y_c)


def objective(model: IcnnModel, prices_signed, y):
    return (prices_signed * y).sum(axis=1) + model.value(y)


def scp_solve(model: IcnnModel, G, h, prices_signed, y_init=None, fp_tol=FP_TOL,
              max_iters=MAX_ITERS, settings: SolverSettings | None = None,
              raise_on_fail=False) -> ScpResult:
    """Fixed-point iteration for a batch of agents sharing ``(G, h)``.

    ``prices_signed`` is ``(N, n)``.  ``y_init`` defaults to zero, which is
    feasible for every valid storage model.  Rows that converge are frozen.
    If the objective rises by more than ``INCREASE_TOL`` the new iterate is
    pulled halfway back toward the previous one before re-expanding.
    """
    lam = np.atleast_2d(np.asarray(prices_signed, dtype=float))
    N, n = lam.shape
    y = np.zeros((N, n)) if y_init is None else np.array(y_init, dtype=float).reshape(N, n)
    obj = objective(model, lam, y)
    traces = [ScpTrace(iterates=[y[i].copy()], objectives=[float(obj[i])]) for i in range(N)]
    active = np.ones(N, dtype=bool)
    converged = np.zeros(N, dtype=bool)
    Q_hat = np.zeros((N, n, n))
    q_hat = np.zeros((N, n))
    center = y.copy()
    sol = None

    for k in range(1, max_iters + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Qk, qk = taylor_qp(model, y[idx])
        step = solve_batch(Qk, lam[idx] + qk, None, None, G, h, settings)
        Q_hat[idx], q_hat[idx], center[idx] = Qk, qk, y[idx]
        sol = _merge(sol, step, idx, N)
        y_new = step.y.copy()
        obj_new = objective(model, lam[idx], y_new)
        rise = obj_new > obj[idx] + INCREASE_TOL * (1.0 + np.abs(obj[idx]))
        if rise.any():
            y_new[rise] = 0.5 * (y_new[rise] + y[idx][rise])
            obj_new[rise] = objective(model, lam[idx][rise], y_new[rise])
            for j in np.flatnonzero(rise):
                traces[idx[j]].halvings += 1
            log.debug("scp: halved %d step(s) at iteration %d", int(rise.sum()), k)
        delta = np.abs(y_new - y[idx]).max(axis=1)
        y[idx], obj[idx] = y_new, obj_new
        for j, i in enumerate(idx):
            traces[i].iterates.append(y_new[j].copy())
            traces[i].objectives.append(float(obj_new[j]))
            traces[i].k_final = k
        done = (delta <= fp_tol) & ~rise
        converged[idx[done]] = True
        active[idx[done]] = False

    for i in range(N):
        traces[i].converged = bool(converged[i])
    if raise_on_fail and not converged.all():
        raise NotConverged(f"{int((~converged).sum())} of {N} SCP solves missed fp_tol={fp_tol:g}")
    return ScpResult(y=y, solution=sol, Q_hat=Q_hat, q_hat=q_hat, center=center,
                     traces=traces, converged=converged)


def _merge(sol, step, idx, N):
    """Write the rows of ``step`` into ``sol`` at positions ``idx``."""
    if sol is None:
        return step
    for name in ("y", "nu", "mu", "slack", "status", "iterations", "residuals", "reg"):
        getattr(sol, name)[idx] = getattr(step, name)
    return sol
