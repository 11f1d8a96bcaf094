"""Datasets of (price, dispatch) pairs: synthesis, CSV I/O and a threshold baseline.

File format, one CSV per sample::

    timestamp,price,charge_mw,discharge_mw
    2019-01-01T00:00:00,31.2,0.0,0.5
    ...

A single signed ``net_mw`` column (positive = charging) is accepted in place
of the two dispatch columns.  A dataset directory holds ``sample_*.csv`` and
an optional ``metadata.json``.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import InsufficientPrices, NoActivationObserved, SchemaError
from .qp import SolverSettings, solve_batch
from .storage import SocCostParams, StorageParams, assemble, signed_prices

SCHEMA_DT = {"daily": 1.0, "horizon": 0.5}
HEADER = ["timestamp", "price", "charge_mw", "discharge_mw"]
NET_HEADER = ["timestamp", "price", "net_mw"]
BUNDLED_PRICES = "sample_prices_hourly.csv"
EQUALITY_FILE = "equality.json"


@dataclass
class Dataset:
    prices: np.ndarray  # (N, T)
    responses: np.ndarray  # (N, 2T) = [charge | discharge]
    dt: float = 1.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.prices = np.atleast_2d(np.asarray(self.prices, dtype=float))
        self.responses = np.atleast_2d(np.asarray(self.responses, dtype=float))
        self.dt = float(self.dt)
        if self.responses.shape != (self.prices.shape[0], 2 * self.prices.shape[1]):
            raise SchemaError(f"responses {self.responses.shape} do not match prices {self.prices.shape}")
        if not (np.isfinite(self.prices).all() and np.isfinite(self.responses).all()):
            raise SchemaError("dataset contains NaN or Inf")

    def __len__(self):
        return self.prices.shape[0]

    @property
    def T(self) -> int:
        return self.prices.shape[1]

    @property
    def charge(self):
        return self.responses[:, :self.T]

    @property
    def discharge(self):
        return self.responses[:, self.T:]

    @property
    def net(self):
        """Signed dispatch, positive when charging."""
        return self.charge - self.discharge

    def subset(self, idx) -> "Dataset":
        return Dataset(self.prices[idx], self.responses[idx], self.dt, dict(self.metadata))

    def with_noise(self, sigma: float, seed=0) -> "Dataset":
        """Copy with Gaussian observation noise (std ``sigma``) on every dispatch entry."""
        rng = np.random.default_rng(seed)
        noisy = self.responses + rng.normal(0.0, sigma, self.responses.shape)
        return Dataset(self.prices.copy(), noisy, self.dt, {**self.metadata, "noise_sigma": sigma})


# ---------------------------------------------------------------- prices

def synthetic_price_days(n: int, seed=0, T=24, dt=1.0) -> np.ndarray:
    """NYISO-like real-time price windows ($/MWh), one row per window.

    Each window starts at midnight and spans ``T * dt`` hours; days inside a
    window get independent shapes.  Prices show a night trough, a morning
    shoulder, an evening peak, AR(1) noise and occasional spikes.
    """
    rng = np.random.default_rng(seed)
    hours = np.arange(T) * dt
    n_days = int(np.ceil(T * dt / 24.0))
    out = np.empty((n, T))
    for i in range(n):
        prices = np.empty(T)
        for day in range(n_days):
            base = rng.uniform(20.0, 45.0)
            night, morning, evening = rng.uniform(0.3, 0.6), rng.uniform(0.2, 0.7), rng.uniform(0.6, 1.8)
            t_m, t_e = 8.0 + rng.uniform(-1, 1), 18.5 + rng.uniform(-1.5, 1.5)
            sel = (hours >= 24 * day) & (hours < 24 * (day + 1))
            hod = hours[sel] - 24 * day
            shape = (1.0 - night * np.exp(-((hod - 4.0) ** 2) / 8.0)
                     + morning * np.exp(-((hod - t_m) ** 2) / 4.5)
                     + evening * np.exp(-((hod - t_e) ** 2) / 8.0))
            prices[sel] = base * shape
            if rng.random() < 0.15:
                k = np.flatnonzero(sel)[rng.integers(sel.sum())]
                prices[k] *= rng.uniform(1.5, 3.0)
        noise = np.zeros(T)
        e = rng.normal(0.0, 0.06, T)
        for t in range(T):
            noise[t] = (0.6 * noise[t - 1] if t else 0.0) + e[t]
        out[i] = prices * (1.0 + noise)
    return out


def data_dir() -> Path | None:
    root = os.environ.get("INVSTORE_DATA_DIR")
    return Path(root) if root else None


def load_price_days(path=None, T=24) -> np.ndarray:
    """Load a ``timestamp,price`` file and cut it into consecutive ``T``-step windows.

    Without ``path`` the bundled hourly sample is used (or
    ``$INVSTORE_DATA_DIR/sample_prices_hourly.csv`` when that exists).
    """
    if path is None:
        root = data_dir()
        if root is not None and (root / BUNDLED_PRICES).exists():
            path = root / BUNDLED_PRICES
        else:
            path = resources.files("invstore") / "data" / BUNDLED_PRICES
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "price" not in reader.fieldnames:
            raise SchemaError(f"{path}: expected a 'price' column")
        vals = []
        for lineno, row in enumerate(reader, start=2):
            try:
                vals.append(float(row["price"]))
            except (TypeError, ValueError):
                raise SchemaError(f"{path}:{lineno}: bad price {row.get('price')!r}") from None
    vals = np.asarray(vals)
    k = len(vals) // T
    return vals[: k * T].reshape(k, T)


# ---------------------------------------------------------------- CSV I/O

def _timestamps(n, dt, start):
    t0 = datetime.fromisoformat(start)
    return [(t0 + timedelta(hours=dt * t)).isoformat() for t in range(n)]


def write_csv(path, prices, response, dt=1.0, start="2019-01-01T00:00:00"):
    prices = np.asarray(prices, dtype=float)
    response = np.asarray(response, dtype=float)
    T = prices.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for ts, lam, p, d in zip(_timestamps(T, dt, start), prices, response[:T], response[T:]):
            w.writerow([ts, repr(float(lam)), repr(float(p)), repr(float(d))])


def load_csv(path, schema="daily") -> Dataset:
    """Read one sample file.  ``schema`` only sets the fallback step length."""
    if schema not in SCHEMA_DT:
        raise SchemaError(f"unknown schema {schema!r}")
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"{path}: no such file")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header == HEADER:
            net_mode = False
        elif header == NET_HEADER:
            net_mode = True
        else:
            raise SchemaError(f"{path}:1: header must be {','.join(HEADER)} or {','.join(NET_HEADER)}")
        stamps, prices, p, d = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header) or any(not c.strip() for c in row):
                raise SchemaError(f"{path}:{lineno}: missing field")
            try:
                stamps.append(datetime.fromisoformat(row[0].strip()))
                vals = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
            if not np.isfinite(vals).all():
                raise SchemaError(f"{path}:{lineno}: non-finite value")
            prices.append(vals[0])
            if net_mode:
                p.append(max(vals[1], 0.0))
                d.append(max(-vals[1], 0.0))
            else:
                p.append(vals[1])
                d.append(vals[2])
    if not prices:
        raise SchemaError(f"{path}: no data rows")
    if len(stamps) > 1:
        steps = np.diff([s.timestamp() for s in stamps]) / 3600.0
        if not np.allclose(steps, steps[0]) or steps[0] <= 0:
            raise SchemaError(f"{path}: timestamps are not evenly spaced")
        dt = float(steps[0])
    else:
        dt = SCHEMA_DT[schema]
    return Dataset(np.array([prices]), np.array([p + d]), dt,
                   {"source": str(path), "start": stamps[0].isoformat()})


def concat(datasets) -> Dataset:
    datasets = list(datasets)
    if not datasets:
        raise SchemaError("no samples")
    dts = {ds.dt for ds in datasets}
    if len(dts) != 1 or len({ds.T for ds in datasets}) != 1:
        raise SchemaError("samples disagree on horizon or step length")
    return Dataset(np.vstack([d.prices for d in datasets]), np.vstack([d.responses for d in datasets]),
                   datasets[0].dt, dict(datasets[0].metadata))


def write_dataset(ds: Dataset, directory, start="2019-01-01T00:00:00"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    t0 = datetime.fromisoformat(start)
    span = timedelta(hours=ds.T * ds.dt)
    for i in range(len(ds)):
        write_csv(directory / f"sample_{i:03d}.csv", ds.prices[i], ds.responses[i], ds.dt,
                  (t0 + i * span).isoformat())
    meta = {k: v for k, v in ds.metadata.items() if k != "source"}
    meta.update(T=ds.T, dt=ds.dt, n_samples=len(ds))
    (directory / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_dataset(path, schema="daily") -> Dataset:
    """Load a directory of sample files (or a single file)."""
    path = Path(path)
    if path.is_file():
        return load_csv(path, schema)
    files = sorted(path.glob("sample_*.csv")) or sorted(path.glob("*.csv"))
    if not files:
        raise SchemaError(f"{path}: no CSV samples")
    ds = concat(load_csv(f, schema) for f in files)
    meta_file = path / "metadata.json"
    ds.metadata = json.loads(meta_file.read_text()) if meta_file.exists() else {}
    ds.metadata["source"] = str(path)
    return ds


# ---------------------------------------------------------------- synthesis

def sample_truth(rng, model="quadratic", T=24, dt=1.0, p_max=0.5, capacity=None,
                 c_range=(0.0, 20.0), eta_range=(0.8, 1.0)) -> StorageParams:
    """Draw ground-truth parameters: c1, c2 uniform, eta uniform, duration from {1..4} h."""
    c1, c2 = rng.uniform(*c_range, size=2)
    eta = rng.uniform(*eta_range)
    if capacity is None:
        capacity = p_max * int(rng.integers(1, 5))
    cls = SocCostParams if model == "soc" else StorageParams
    return cls.from_physical(c1, c2, eta, e_min=0.0, e_max=capacity, e0=capacity / 2.0,
                             p_max=p_max, T=T, dt=dt)


def simulate(params: StorageParams, prices, settings: SolverSettings | None = None) -> np.ndarray:
    """Optimal dispatch of the agent for each price row."""
    prices = np.atleast_2d(prices)
    prob = assemble(params, prices[0])
    sol = solve_batch(prob.Q, signed_prices(prices) + prob.q, None, None, prob.G, prob.h,
                      settings or SolverSettings(tol=1e-10))
    if not sol.optimal.all():
        raise RuntimeError("ground-truth simulation failed to converge")
    return sol.y


def generate_synthetic(model="quadratic", seed=0, n_train=20, n_test=10, price_days=None,
                       T=24, dt=1.0, p_max=0.5, capacity=None, truth=None):
    """Sample a ground truth agent and simulate its responses to distinct price windows.

    Returns ``(train, test, truth)``.
    """
    rng = np.random.default_rng(seed)
    if truth is None:
        truth = sample_truth(rng, model, T=T, dt=dt, p_max=p_max, capacity=capacity)
    n = n_train + n_test
    if price_days is None:
        if T == 24 and dt == 1.0:
            price_days = load_price_days(T=T)
        else:
            price_days = synthetic_price_days(max(4 * n, 100), seed=int(rng.integers(2**31)), T=T, dt=dt)
    price_days = np.atleast_2d(np.asarray(price_days, dtype=float))
    if price_days.shape[1] != T:
        raise InsufficientPrices(f"price windows have {price_days.shape[1]} steps, need {T}")
    if len(np.unique(price_days, axis=0)) < n:
        raise InsufficientPrices(f"need {n} distinct price windows, have {len(price_days)}")
    idx = rng.choice(len(price_days), size=n, replace=False)
    prices = price_days[idx]
    responses = simulate(truth, prices)
    meta = {"source": "synthetic", "model": model, "seed": seed, "truth": truth.to_dict()}
    full = Dataset(prices, responses, dt, meta)
    return full.subset(slice(0, n_train)), full.subset(slice(n_train, n)), truth


# ---------------------------------------------------------------- baseline

@dataclass
class ThresholdRule:
    r_charge: float
    r_discharge: float


def fit_threshold(train: Dataset, act_tol=1e-6) -> ThresholdRule:
    """Median price-to-mean ratios at which the agent charged / discharged."""
    mean = train.prices.mean(axis=1, keepdims=True)
    ratio = train.prices / mean
    rp = ratio[train.charge > act_tol]
    rd = ratio[train.discharge > act_tol]
    if rp.size == 0 or rd.size == 0:
        raise NoActivationObserved("training data needs at least one charge and one discharge")
    return ThresholdRule(float(np.median(rp)), float(np.median(rd)))


def threshold_baseline(train: Dataset, test_prices, p_max, e_min_shift, e_max_shift,
                       eta_sq=1.0, dt=None, rule: ThresholdRule | None = None) -> np.ndarray:
    """Rule-based forecast: full-power charge below ``r_p * mean``, discharge above ``r_d * mean``.

    Energy limits are enforced greedily in time order on the shifted
    cumulative-energy scale; returns ``(N, 2T)`` dispatch.
    """
    rule = rule or fit_threshold(train)
    dt = train.dt if dt is None else dt
    prices = np.atleast_2d(np.asarray(test_prices, dtype=float))
    N, T = prices.shape
    out = np.zeros((N, 2 * T))
    for i in range(N):
        mean = prices[i].mean()
        level = 0.0
        for t in range(T):
            lam = prices[i, t]
            if lam <= rule.r_charge * mean and lam < rule.r_discharge * mean:
                p = min(p_max, max(0.0, (e_max_shift - level) / (eta_sq * dt)))
                out[i, t] = p
                level += eta_sq * p * dt
            elif lam >= rule.r_discharge * mean:
                d = min(p_max, max(0.0, (level - e_min_shift) / dt))
                out[i, T + t] = d
                level -= d * dt
    return out


# ---------------------------------------------------------------- equality regime

@dataclass
class EqualityData:
    """Samples of the equality-constrained agent ``min lam'y + alpha/2 |y|^2  s.t.  A y = b``."""

    prices: np.ndarray  # (N, n)
    responses: np.ndarray  # (N, n)
    A: np.ndarray
    alpha: float | None = None
    b: np.ndarray | None = None


def equality_closed_form(prices, A, alpha, b) -> np.ndarray:
    """Minimisers of ``lam'y + alpha/2 |y|^2`` over ``A y = b``, one row per price vector."""
    A = np.asarray(A, dtype=float)
    K2 = A.T @ np.linalg.inv(A @ A.T)
    proj = K2 @ A - np.eye(A.shape[1])
    return np.atleast_2d(prices) @ proj.T / alpha + K2 @ np.asarray(b, dtype=float)


def generate_equality(seed=0, n_samples=20, n=8, m=2, alpha_range=(0.5, 5.0)) -> EqualityData:
    """Random full-rank ``A``, true ``(alpha, b)`` and closed-form responses."""
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(m, n))
    alpha = float(rng.uniform(*alpha_range))
    b = rng.normal(size=m)
    prices = rng.normal(size=(n_samples, n))
    return EqualityData(prices, equality_closed_form(prices, A, alpha, b), A, alpha, b)


def write_equality(ds: EqualityData, path):
    """Persist equality-regime samples as one JSON file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"prices": ds.prices.tolist(), "responses": ds.responses.tolist(), "A": ds.A.tolist(),
               "truth": None if ds.alpha is None else {"alpha": ds.alpha, "b": np.asarray(ds.b).tolist()}}
    path.write_text(json.dumps(payload) + "\n")
    return path


def load_equality(path) -> EqualityData:
    path = Path(path)
    if path.is_dir():
        path = path / EQUALITY_FILE
    try:
        d = json.loads(path.read_text())
        prices = np.atleast_2d(np.asarray(d["prices"], dtype=float))
        responses = np.atleast_2d(np.asarray(d["responses"], dtype=float))
        A = np.atleast_2d(np.asarray(d["A"], dtype=float))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: not an equality dataset ({exc})") from None
    if prices.shape != responses.shape or A.shape[1] != prices.shape[1]:
        raise SchemaError(f"{path}: inconsistent shapes")
    truth = d.get("truth") or {}
    b = truth.get("b")
    return EqualityData(prices, responses, A, truth.get("alpha"), None if b is None else np.asarray(b))
