"""Dense primal-dual interior-point solver for convex quadratic programs.

Problems have the form::

    minimize    (lam + q)' y + y' Q y
    subject to  A y = b
                G y <= h

The quadratic term carries no 1/2, so stationarity reads
``lam + q + (Q + Q') y + A' nu + G' mu = 0``.

The core routine works on stacks of problems (a leading batch axis) so the
trainer can solve one QP per sample in a single vectorised pass.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import nnls

from .errors import DimensionMismatch


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITERATIONS = "MaxIterations"


@dataclass
class SolverSettings:
    tol: float = 1e-8
    max_iter: int = 100
    reg: float = 1e-8  # diagonal added to Q when it is (near) singular
    reg_threshold: float = 1e-9
    step_fraction: float = 0.99
    barrier: float = 0.0  # > 0: stop on the central path where every mu_i s_i equals this value


def _as_matrix(x, ncols):
    if x is None:
        return np.zeros((0, ncols))
    x = np.asarray(x, dtype=float)
    if x.ndim == 1 and x.size == 0:
        return np.zeros((0, ncols))
    return np.atleast_2d(x)


def _as_vector(x):
    if x is None:
        return np.zeros(0)
    return np.asarray(x, dtype=float).reshape(-1)


@dataclass
class QpProblem:
    """A single convex QP.  ``A``/``G`` may be empty (shape ``(0, n)``)."""

    Q: np.ndarray
    q: np.ndarray
    lam: np.ndarray
    A: np.ndarray = None
    b: np.ndarray = None
    G: np.ndarray = None
    h: np.ndarray = None

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        n = self.Q.shape[0]
        self.q = _as_vector(self.q)
        self.lam = _as_vector(self.lam) if self.lam is not None else np.zeros(n)
        self.A = _as_matrix(self.A, n)
        self.b = _as_vector(self.b)
        self.G = _as_matrix(self.G, n)
        self.h = _as_vector(self.h)
        self.check_dims()

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def p(self) -> int:
        return self.G.shape[0]

    def check_dims(self):
        n = self.n
        if self.Q.shape != (n, n):
            raise DimensionMismatch(f"Q must be square, got {self.Q.shape}")
        if self.q.shape != (n,) or self.lam.shape != (n,):
            raise DimensionMismatch("q and lam must have length n")
        if self.A.shape[1] != n or self.b.shape != (self.A.shape[0],):
            raise DimensionMismatch("A must be m x n and b of length m")
        if self.G.shape[1] != n or self.h.shape != (self.G.shape[0],):
            raise DimensionMismatch("G must be p x n and h of length p")

    def validate(self, psd_tol=1e-10):
        """Check symmetry/PSD of Q and the row rank of A."""
        if not np.allclose(self.Q, self.Q.T, atol=1e-12, rtol=1e-10):
            raise ValueError("Q is not symmetric")
        if np.linalg.eigvalsh(self.Q).min() < -psd_tol:
            raise ValueError("Q is not positive semidefinite")
        if self.m > 0 and np.linalg.matrix_rank(self.A) < self.m:
            raise ValueError("A does not have full row rank")

    def objective(self, y) -> float:
        y = np.asarray(y, dtype=float)
        return float((self.lam + self.q) @ y + y @ self.Q @ y)


@dataclass
class QpSolution:
    y_star: np.ndarray
    nu_star: np.ndarray
    mu_star: np.ndarray
    status: Status
    iterations: int
    residuals: tuple  # (primal, dual, complementarity)
    reg: float = 0.0
    slack: np.ndarray = field(default=None, repr=False)

    @property
    def optimal(self) -> bool:
        return self.status == Status.OPTIMAL


@dataclass
class BatchSolution:
    """Stacked solutions; row ``i`` belongs to problem ``i``."""

    y: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    slack: np.ndarray
    status: np.ndarray  # object array of Status
    iterations: np.ndarray
    residuals: np.ndarray  # (B, 3)
    reg: np.ndarray

    @property
    def optimal(self) -> np.ndarray:
        return np.array([s == Status.OPTIMAL for s in self.status])

    def __getitem__(self, i) -> QpSolution:
        return QpSolution(
            y_star=self.y[i], nu_star=self.nu[i], mu_star=self.mu[i],
            status=self.status[i], iterations=int(self.iterations[i]),
            residuals=tuple(self.residuals[i]), reg=float(self.reg[i]),
            slack=self.slack[i],
        )


def _tr(M):
    return np.swapaxes(M, -1, -2)


def _mv(M, v):
    return (M @ v[..., None])[..., 0]


def _stacked_solve(M, r):
    """Batched solve; rows whose matrix is numerically singular come back as NaN."""
    try:
        return np.linalg.solve(M, r[..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = np.full(r.shape, np.nan)
        for i in range(M.shape[0]):
            try:
                out[i] = np.linalg.solve(M[i], r[i])
            except np.linalg.LinAlgError:
                pass
        return out


def _max_step(v, dv):
    """Largest alpha in (0, 1] keeping v + alpha dv >= 0, per batch row."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dv < 0, -v / dv, np.inf)
    if ratio.shape[-1] == 0:
        return np.ones(ratio.shape[:-1])
    return np.minimum(1.0, ratio.min(axis=-1))


def regularization(Q, settings: SolverSettings):
    """Diagonal shift applied to each Q in a stack (0 when Q is safely PD)."""
    Qs = 0.5 * (Q + _tr(Q))
    lam_min = np.linalg.eigvalsh(Qs)[..., 0]
    return np.where(lam_min < settings.reg_threshold, settings.reg, 0.0)


def solve_batch(Q, c, A, b, G, h, settings: SolverSettings | None = None,
                augmented: bool = False) -> BatchSolution:
    """Interior-point solve of a stack of QPs.

    ``Q`` is ``(B, n, n)`` or ``(n, n)``; ``c = lam + q`` is ``(B, n)``;
    ``A``/``G`` are shared ``(m, n)``/``(p, n)`` or stacked; ``b``/``h`` are
    ``(m,)``/``(p,)`` or stacked.  Converged rows are frozen while the rest
    keep iterating.

    With ``settings.barrier = tau > 0`` the target is the log-barrier
    solution (``mu_i s_i = tau`` for every inequality) instead of the optimum;
    it is smooth in the data and strictly interior.

    Newton steps use the normal equations ``H + G' W G`` by default.  Rows
    that still fail are retried with the larger but better conditioned
    augmented system (``augmented=True``), which keeps tiny curvature visible
    when ``W`` spans many orders of magnitude.
    """
    settings = settings or SolverSettings()
    c = np.atleast_2d(np.asarray(c, dtype=float))
    B, n = c.shape
    Q = np.broadcast_to(np.asarray(Q, dtype=float), (B, n, n))
    A = np.zeros((0, n)) if A is None or np.size(A) == 0 else np.asarray(A, dtype=float)
    G = np.zeros((0, n)) if G is None or np.size(G) == 0 else np.asarray(G, dtype=float)
    m, p = A.shape[-2], G.shape[-2]
    b = np.broadcast_to(np.asarray(b, dtype=float).reshape(-1, m) if m else np.zeros((1, 0)), (B, m))
    h = np.broadcast_to(np.asarray(h, dtype=float).reshape(-1, p) if p else np.zeros((1, 0)), (B, p))

    reg = regularization(Q, settings)
    H = Q + _tr(Q) + 2.0 * reg[:, None, None] * np.eye(n)
    At, Gt = _tr(A), _tr(G)
    tol = settings.tol
    tau = float(settings.barrier) if p else 0.0

    def kkt_solve(M, r1, r2):
        if m:
            top = np.concatenate([M, np.broadcast_to(At, (B, n, m))], axis=-1)
            bot = np.concatenate([np.broadcast_to(A, (B, m, n)), np.zeros((B, m, m))], axis=-1)
            M = np.concatenate([top, bot], axis=-2)
            r1 = np.concatenate([r1, r2], axis=-1)
        sol = _stacked_solve(M, r1)
        return sol[:, :n], sol[:, n:]

    # cold start: least-squares-like point with unit scaling, then shift into the interior
    y, nu = kkt_solve(H + Gt @ G, -c + _mv(Gt, h), b)
    s = h - _mv(G, y)
    mu = -s.copy()
    if p:
        for v in (s, mu):
            vmin = v.min(axis=1)
            shift = np.where(vmin < 1e-8 * (1.0 + np.abs(v).max(axis=1)), 1.0 - vmin, 0.0)
            v += shift[:, None]

    status = np.array([Status.MAX_ITERATIONS] * B, dtype=object)
    active = np.ones(B, dtype=bool)
    iters = np.zeros(B, dtype=int)
    dual_tol = tol * (1.0 + np.abs(c).max(axis=1))

    for it in range(settings.max_iter + 1):
        rd = _mv(H, y) + c + _mv(At, nu) + _mv(Gt, mu)
        re = _mv(A, y) - b
        ri = _mv(G, y) + s - h
        comp = s * mu
        pres = np.maximum(np.abs(re).max(axis=1, initial=0.0), np.abs(ri).max(axis=1, initial=0.0))
        dres = np.abs(rd).max(axis=1)
        gres = np.abs(comp - tau).max(axis=1, initial=0.0)

        done = (pres <= tol) & (dres <= dual_tol) & (gres <= tol)
        newly = active & done
        status[newly] = Status.OPTIMAL
        iters[newly] = it

        # Farkas-type certificate: the scaled duals approach a ray with h'mu + b'nu < 0
        if p:
            scale = np.abs(mu).sum(axis=1) + np.abs(nu).sum(axis=1)
            ray = np.abs(_mv(Gt, mu) + _mv(At, nu)).max(axis=1)
            dual_obj = (h * mu).sum(axis=1) + (b * nu).sum(axis=1)
            infeas = active & ~done & (scale > 1e6) & (ray <= 1e-7 * scale) & (dual_obj < -1e-7 * scale)
            status[infeas] = Status.INFEASIBLE
            iters[infeas] = it
            active &= ~infeas
        active &= ~done
        if not active.any() or it == settings.max_iter:
            break

        if p:
            W = mu / s
            M = H + Gt @ (W[..., None] * G)
        else:
            W = np.zeros((B, 0))
            M = H.copy()
        # frozen rows get a harmless system so the stacked solve cannot fail
        M[~active] = np.eye(n)
        if augmented and p:
            Kaug = np.zeros((B, n + m + p, n + m + p))
            Kaug[:, :n, :n] = H
            Kaug[:, :n, n:n + m] = At
            Kaug[:, :n, n + m:] = Gt
            Kaug[:, n:n + m, :n] = A
            Kaug[:, n + m:, :n] = G
            idx = np.arange(n + m, n + m + p)
            with np.errstate(divide="ignore"):
                Kaug[:, idx, idx] = -s / mu
            Kaug[~active] = np.eye(n + m + p)
        gap = comp.mean(axis=1) if p else np.zeros(B)

        def direction(rc):
            if augmented and p:
                sol = _stacked_solve(Kaug, np.concatenate([-rd, -re, -ri + rc / mu], axis=-1))
                dy, dnu, dmu = sol[:, :n], sol[:, n:n + m], sol[:, n + m:]
                return dy, dnu, dmu, -ri - _mv(G, dy)
            r1 = -rd - _mv(Gt, W * ri - rc / s) if p else -rd
            dy, dnu = kkt_solve(M, r1, -re)
            Gdy = _mv(G, dy)
            dmu = W * (Gdy + ri) - rc / s if p else np.zeros((B, 0))
            ds = -ri - Gdy
            return dy, dnu, dmu, ds

        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            dy, dnu, dmu, ds = direction(comp)
            if p:
                a_aff = np.minimum(_max_step(s, ds), _max_step(mu, dmu))
                gap_aff = ((s + a_aff[:, None] * ds) * (mu + a_aff[:, None] * dmu)).mean(axis=1)
                sigma = np.where(gap > 0, (gap_aff / np.where(gap > 0, gap, 1.0)) ** 3, 0.0)
                rc = comp + ds * dmu - np.maximum(sigma * gap, tau)[:, None]
                if tau > 0:
                    # near the barrier target a plain Newton step converges quadratically
                    rc = np.where((gap <= 10.0 * tau)[:, None], comp - tau, rc)
                dy, dnu, dmu, ds = direction(rc)
                alpha = np.minimum(1.0, settings.step_fraction *
                                   np.minimum(_max_step(s, ds), _max_step(mu, dmu)))
            else:
                alpha = np.ones(B)

        alpha = np.where(active & np.isfinite(alpha), alpha, 0.0)
        bad = active & ~(np.isfinite(dy).all(axis=1) & np.isfinite(dmu).all(axis=1))
        alpha[bad] = 0.0
        iters[bad] = it
        active &= ~bad
        a = alpha[:, None]
        y = y + a * np.nan_to_num(dy)
        nu = nu + a * np.nan_to_num(dnu)
        mu = mu + a * np.nan_to_num(dmu)
        s = s + a * np.nan_to_num(ds)

    iters[active] = settings.max_iter
    out = BatchSolution(y=y, nu=nu, mu=mu, slack=s, status=status, iterations=iters,
                        residuals=np.zeros((B, 3)), reg=reg)
    for i in range(B):
        if tau > 0:
            out.residuals[i] = _residuals(H[i], c[i], A if A.ndim == 2 else A[i], b[i],
                                          G if G.ndim == 2 else G[i], h[i], y[i], nu[i], mu[i])
            out.residuals[i, 2] = np.abs(s[i] * mu[i] - tau).max(initial=0.0)
        elif status[i] != Status.INFEASIBLE:
            _polish(out, i, H[i], c[i], A if A.ndim == 2 else A[i], b[i],
                    G if G.ndim == 2 else G[i], h[i], tol, dual_tol[i])
    retry = np.flatnonzero([st == Status.MAX_ITERATIONS for st in out.status])
    if not augmented and p and retry.size:
        pick = lambda X: X if X.ndim == 2 else X[retry]
        sub = solve_batch(Q[retry], c[retry], pick(A), b[retry], pick(G), h[retry],
                          settings, augmented=True)
        for j, i in enumerate(retry):
            if sub.status[j] == Status.OPTIMAL:
                out.y[i], out.nu[i], out.mu[i], out.slack[i] = sub.y[j], sub.nu[j], sub.mu[j], sub.slack[j]
                out.status[i], out.iterations[i] = sub.status[j], sub.iterations[j]
                out.residuals[i] = sub.residuals[j]
    return out


def _residuals(H, c, A, b, G, h, y, nu, mu):
    rd = H @ y + c + A.T @ nu + G.T @ mu
    viol = G @ y - h
    pres = max(np.abs(A @ y - b).max(initial=0.0), viol.max(initial=0.0))
    return pres, np.abs(rd).max(), np.abs(mu * viol).max(initial=0.0)


def _independent_rows(M, rtol=1e-9):
    """Indices of a maximal linearly independent subset of the rows of ``M``."""
    if M.shape[0] == 0:
        return np.arange(0)
    _, R, piv = scipy.linalg.qr(M.T, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    return np.sort(piv[:int((d > rtol * d[0]).sum())])


def _active_solve(H, c, A, b, G, h, act, reduce, hint=None):
    """Equality-constrained solve on the active set ``act``.

    With ``reduce`` the active rows are first thinned to an independent subset
    and the multipliers are then refit over all active rows by NNLS, which
    handles degenerate vertices where the plain KKT matrix is singular.
    """
    n, m = H.shape[0], A.shape[0]
    idx = np.flatnonzero(act)
    if reduce:
        Gn = G[idx] @ scipy.linalg.null_space(A) if m else G[idx]
        idx_k = idx[_independent_rows(Gn)]
    else:
        idx_k = idx
    Ga = G[idx_k]
    k = Ga.shape[0]
    K = np.zeros((n + m + k, n + m + k))
    K[:n, :n] = H
    K[:n, n:n + m] = A.T
    K[:n, n + m:] = Ga.T
    K[n:n + m, :n] = A
    K[n + m:, :n] = Ga
    rhs = np.concatenate([-c, b, h[idx_k]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.isfinite(sol).all():
        return None
    y, nu = sol[:n], sol[n:n + m]
    mu = np.zeros(G.shape[0])
    mu[idx_k] = sol[n + m:]
    if reduce and mu.min(initial=0.0) < 0.0:
        mu[:] = 0.0
        g = -(H @ y + c)
        D = np.hstack([A.T, G[idx].T])
        x0 = np.zeros(m + idx.size) if hint is None else np.concatenate([hint[0], hint[1][idx]])
        # smallest change to the interior-point multipliers that restores stationarity
        x = x0 + np.linalg.lstsq(D, g - D @ x0, rcond=None)[0]
        if x[m:].min(initial=0.0) < 0.0:
            Dn = np.hstack([A.T, -A.T, G[idx].T])
            z, _ = nnls(Dn, g)
            x = np.concatenate([z[:m] - z[m:2 * m], z[2 * m:]])
        nu = x[:m]
        mu[idx] = x[m:]
    return y, nu, mu


def _polish(out: BatchSolution, i, H, c, A, b, G, h, tol, dual_tol):
    """Refine row ``i`` by solving the equality system on the guessed active set.

    The refined point replaces the interior iterate only if it is primal and
    dual feasible and its residuals are no worse.
    """
    y, nu, mu, s = out.y[i], out.nu[i], out.mu[i], out.slack[i]
    before = _residuals(H, c, A, b, G, h, y, nu, mu)
    ratio = mu / np.maximum(s, 1e-300)
    for cut, reduce in ((1.0, False), (1.0, True), (1e2, True), (1e4, True)):
        act = ratio > cut
        cand = _active_solve(H, c, A, b, G, h, act, reduce, hint=(nu, mu))
        if cand is None:
            continue
        y2, nu2, mu2 = cand
        viol = G @ y2 - h
        if mu2.min(initial=0.0) < -tol or viol.max(initial=-1.0) > tol:
            continue
        mu2 = np.maximum(mu2, 0.0)
        after = _residuals(H, c, A, b, G, h, y2, nu2, mu2)
        if (after[0] <= max(before[0], tol) and after[1] <= max(before[1], dual_tol)
                and after[2] <= max(before[2], tol)):
            out.y[i], out.nu[i], out.mu[i] = y2, nu2, mu2
            out.slack[i] = np.where(act, 0.0, np.maximum(-viol, 0.0))
            before = after
            break
    out.residuals[i] = before
    pres, dres, gres = before
    if pres <= tol and dres <= dual_tol and gres <= tol:
        out.status[i] = Status.OPTIMAL
    elif out.status[i] == Status.OPTIMAL:
        out.status[i] = Status.MAX_ITERATIONS


def solve_qp(problem: QpProblem, settings: SolverSettings | None = None) -> QpSolution:
    """Solve one QP; status is ``Optimal`` only if all residuals meet ``tol``."""
    sol = solve_batch(problem.Q[None], (problem.lam + problem.q)[None], problem.A,
                      problem.b, problem.G, problem.h, settings)
    return sol[0]


def kkt_residuals(problem: QpProblem, sol: QpSolution) -> dict:
    """Residuals of the optimality conditions, evaluated on the unregularised problem."""
    y, nu, mu = sol.y_star, sol.nu_star, sol.mu_star
    Q = problem.Q
    stat = problem.lam + problem.q + (Q + Q.T) @ y + problem.A.T @ nu + problem.G.T @ mu
    viol = problem.G @ y - problem.h
    return {
        "stationarity": float(np.abs(stat).max(initial=0.0)),
        "equality": float(np.abs(problem.A @ y - problem.b).max(initial=0.0)),
        "inequality": float(viol.max(initial=-np.inf)) if problem.p else 0.0,
        "complementarity": float(np.abs(mu * viol).max(initial=0.0)),
        "dual_feasibility": float(mu.min(initial=0.0)),
    }
