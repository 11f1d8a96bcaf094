"""Gradients of a QP argmin through its KKT conditions.

The total differential of the optimality conditions gives a linear system
``K [dy; dmu; dnu] = -rhs(dtheta)`` with::

    K = [[Q + Q',      G',          A'],
         [D(mu) G,     D(G y - h),  0 ],
         [A,           0,           0 ]]

Instead of forming ``dy/dtheta`` for every parameter we solve one adjoint
system ``K' z = -[dL/dy; 0; 0]`` and read every parameter gradient off ``z``
as an outer product.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import SingularKkt
from .qp import QpProblem, QpSolution, _independent_rows

DEG_TOL = 1e-7
DEG_SHIFT = 1e-10


@dataclass
class KktFactor:
    K: np.ndarray
    lu: tuple
    active: np.ndarray
    degenerate: np.ndarray
    y: np.ndarray
    mu: np.ndarray  # multipliers with inactive rows set to exactly zero
    nu: np.ndarray


@dataclass
class ParamGrads:
    dQ: np.ndarray
    dq: np.ndarray
    dlam: np.ndarray
    dA: np.ndarray
    db: np.ndarray
    dG: np.ndarray
    dh: np.ndarray

    def __add__(self, other):
        return ParamGrads(*(a + b for a, b in zip(self.astuple(), other.astuple())))

    def astuple(self):
        return (self.dQ, self.dq, self.dlam, self.dA, self.db, self.dG, self.dh)


def clean_duals(mu, slack, deg_tol=DEG_TOL):
    """Split constraints into active/inactive and zero the inactive duals.

    A row is active when its multiplier dominates its slack.  Rows where both
    are below ``deg_tol`` are flagged degenerate.
    """
    mu = np.asarray(mu, dtype=float)
    slack = np.asarray(slack, dtype=float)
    active = mu > slack
    degenerate = (mu < deg_tol) & (slack < deg_tol)
    mu_c = np.where(active & ~degenerate, mu, 0.0)
    slack_c = np.where(active & ~degenerate, 0.0, slack)
    return active, degenerate, mu_c, slack_c


def drop_dependent(A, G, mu_c, slack_c, degenerate, nu=None):
    """Demote active rows that are linear combinations of other active rows.

    At a degenerate vertex the active constraint normals are dependent, K is
    singular and the multipliers are not unique.  Keeping an independent subset
    describes the same face, so the primal sensitivity is unchanged; dropped
    rows are handled like degenerate ones.  The force ``G_act' mu_act`` of the
    dropped rows is moved onto the kept rows (and ``nu``) so that stationarity
    still holds; otherwise the ``mu z_y'`` term of ``dL/dG`` is wrong for
    parameters that enter the dependent rows.  Works on one sample and returns
    ``(mu_c, slack_c, degenerate, nu)``.
    """
    nu = np.zeros(A.shape[0]) if nu is None else np.asarray(nu, dtype=float)
    act = np.flatnonzero(mu_c > 0)
    if act.size == 0:
        return mu_c, slack_c, degenerate, nu
    Ga = G[act]
    if A.shape[0]:
        Ga = Ga @ scipy.linalg.null_space(A)
    keep = _independent_rows(Ga)
    if keep.size == act.size:
        return mu_c, slack_c, degenerate, nu
    kept = act[keep]
    drop = np.setdiff1d(act, kept)
    force = G[act].T @ mu_c[act] + A.T @ nu
    basis = np.hstack([G[kept].T, A.T])
    coef = np.linalg.lstsq(basis, force, rcond=None)[0]
    mu_c, slack_c, degenerate = mu_c.copy(), slack_c.copy(), degenerate.copy()
    mu_c[kept] = coef[:kept.size]
    mu_c[drop] = 0.0
    slack_c[drop] = 0.0
    degenerate[drop] = True
    return mu_c, slack_c, degenerate, coef[kept.size:]


def assemble_K(Qsym, A, G, mu, slack, degenerate):
    """Stacked K matrices; ``slack = h - G y`` so the middle block is ``-D(slack)``."""
    Qsym = np.asarray(Qsym)
    batch = Qsym.shape[:-2]
    n = Qsym.shape[-1]
    m, p = A.shape[-2], G.shape[-2]
    N = n + p + m
    K = np.zeros(batch + (N, N))
    K[..., :n, :n] = Qsym
    K[..., :n, n:n + p] = np.swapaxes(G, -1, -2)
    K[..., :n, n + p:] = np.swapaxes(A, -1, -2)
    K[..., n:n + p, :n] = mu[..., :, None] * G
    idx = np.arange(n, n + p)
    K[..., idx, idx] = -slack + np.where(degenerate, DEG_SHIFT, 0.0)
    K[..., n + p:, :n] = A
    return K


def _grads_from_adjoint(z, y, mu, nu, n, p):
    """Parameter gradients given the adjoint solution ``z`` (stackable)."""
    zy, zmu, znu = z[..., :n], z[..., n:n + p], z[..., n + p:]
    outer = lambda a, b: a[..., :, None] * b[..., None, :]
    dQ = outer(zy, y) + outer(y, zy)
    mz = mu * zmu
    return ParamGrads(
        dQ=dQ,
        dq=zy.copy(),
        dlam=zy.copy(),
        dA=outer(nu, zy) + outer(znu, y),
        db=-znu,
        dG=outer(mu, zy) + outer(mz, y),
        dh=-mz,
    )


def _regularised_Qsym(problem_Q, reg):
    n = problem_Q.shape[-1]
    return problem_Q + np.swapaxes(problem_Q, -1, -2) + 2.0 * np.asarray(reg)[..., None, None] * np.eye(n)


def factor_kkt(problem: QpProblem, solution: QpSolution) -> KktFactor:
    """Assemble and LU-factor K at an optimal solution."""
    if not solution.optimal:
        raise SingularKkt(f"cannot differentiate a {solution.status.value} solve")
    slack = problem.h - problem.G @ solution.y_star
    if solution.slack is not None:
        slack = np.where(solution.slack == 0.0, 0.0, np.maximum(slack, 0.0))
    active, degenerate, mu_c, slack_c = clean_duals(solution.mu_star, slack)
    mu_c, slack_c, degenerate, nu = drop_dependent(problem.A, problem.G, mu_c, slack_c, degenerate,
                                                   solution.nu_star)
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} degenerate constraint(s); perturbing K", RuntimeWarning)
    Qsym = _regularised_Qsym(problem.Q, solution.reg)
    K = assemble_K(Qsym, problem.A, problem.G, mu_c, slack_c, degenerate)
    lu = scipy.linalg.lu_factor(K.T, check_finite=False)
    if not np.isfinite(lu[0]).all() or np.abs(np.diag(lu[0])).min(initial=np.inf) == 0.0:
        raise SingularKkt("K is singular")
    return KktFactor(K=K, lu=lu, active=active, degenerate=degenerate,
                     y=solution.y_star, mu=mu_c, nu=nu)


def backward(factor: KktFactor, problem: QpProblem, solution: QpSolution, dL_dy) -> ParamGrads:
    """Gradients of a scalar loss with respect to every QP parameter."""
    n, p = problem.n, problem.p
    rhs = np.zeros(factor.K.shape[0])
    rhs[:n] = -np.asarray(dL_dy, dtype=float)
    z = scipy.linalg.lu_solve(factor.lu, rhs, check_finite=False)
    if not np.isfinite(z).all():
        raise SingularKkt("adjoint solve produced non-finite values")
    return _grads_from_adjoint(z, factor.y, factor.mu, factor.nu, n, p)


def backward_batch(Q, A, G, h, y, mu, nu, slack, reg, dL_dy, smooth=False) -> ParamGrads:
    """Adjoint gradients for a stack of solutions (one row per sample).

    ``Q``/``A``/``G``/``h`` may be shared or stacked.  Returned arrays keep the
    leading sample axis.  ``smooth=True`` is for strictly interior barrier
    solutions: the raw ``(mu, slack)`` enter ``K`` with no active-set cleanup.
    """
    y = np.atleast_2d(y)
    B, n = y.shape
    G = np.asarray(G)
    A = np.zeros((0, n)) if A is None or np.size(A) == 0 else np.asarray(A)
    p = G.shape[-2]
    Q = np.broadcast_to(Q, (B, n, n))
    if smooth:
        mu_c, slack_c = np.atleast_2d(mu).astype(float), np.atleast_2d(slack).astype(float)
        degenerate = np.zeros(mu_c.shape, dtype=bool)
        K = assemble_K(_regularised_Qsym(Q, reg), A, G, mu_c, slack_c, degenerate)
        return _adjoint(K, y, mu_c, nu, dL_dy, n, p)
    active, degenerate, mu_c, slack_c = clean_duals(mu, slack)
    mu_c, slack_c, degenerate = (np.atleast_2d(a).copy() for a in (mu_c, slack_c, degenerate))
    nu = np.array(np.broadcast_to(np.atleast_2d(nu), (B, A.shape[-2])), dtype=float)
    for i in range(B):
        Gi = G if G.ndim == 2 else G[i]
        Ai = A if A.ndim == 2 else A[i]
        mu_c[i], slack_c[i], degenerate[i], nu[i] = drop_dependent(Ai, Gi, mu_c[i], slack_c[i],
                                                                   degenerate[i], nu[i])
    K = assemble_K(_regularised_Qsym(Q, reg), A, G, mu_c, slack_c, degenerate)
    return _adjoint(K, y, mu_c, nu, dL_dy, n, p)


def _adjoint(K, y, mu_c, nu, dL_dy, n, p):
    B = y.shape[0]
    rhs = np.zeros((B, K.shape[-1]))
    rhs[:, :n] = -np.asarray(dL_dy)
    try:
        z = np.linalg.solve(np.swapaxes(K, -1, -2), rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularKkt(str(exc)) from exc
    return _grads_from_adjoint(z, y, mu_c, np.atleast_2d(nu), n, p)
