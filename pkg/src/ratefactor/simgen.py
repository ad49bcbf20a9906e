"""Synthetic arrival data from two-way square-root-rate models, and their Gaussian fits.

MUL:  sqrt(lambda_ij) = alpha_i * gamma[d_i, j],   sum_j gamma[d, j] = 1
ADD:  sqrt(lambda_ij) = mu + alpha_i + beta_j + gamma[d_i, j]

In both, the day level follows an AR(1) around a weekday mean::

    alpha_i - a[d_i] = b * (alpha_{i-1} - a[d_{i-1}]) + eta_i,  eta_i ~ N(0, sd^2)
"""

from __future__ import annotations

import datetime as _dt
import json
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from .core import RATE_FLOOR, CountMatrix, DataError, WEEKDAYS, next_weekday, quarter_hour_labels, weekday_sequence

_TOL = 1e-10


def _arr(x, shape=None):
    a = np.asarray(x, dtype=float)
    if shape is not None and a.shape != shape:
        raise DataError(f"expected shape {shape}, got {a.shape}")
    return a


@dataclass(frozen=True)
class MulParams:
    day_intercepts: np.ndarray
    ar_slope: float
    innovation_sd: float
    day_profiles: np.ndarray
    # extra day-level multiplicative shocks exp(N(0, shock_sd^2)) applied outside the AR recursion
    shock_sd: float = 0.0

    def __post_init__(self):
        a = _arr(self.day_intercepts, (5,))
        g = np.atleast_2d(_arr(self.day_profiles))
        if g.shape[0] != 5:
            raise DataError("day_profiles needs one row per weekday")
        if np.any(g < 0):
            raise DataError("day profiles must be nonnegative")
        if np.any(np.abs(g.sum(axis=1) - 1) > _TOL):
            raise DataError("each day profile must sum to 1")
        if self.innovation_sd < 0 or self.shock_sd < 0:
            raise DataError("standard deviations must be >= 0")
        object.__setattr__(self, "day_intercepts", a)
        object.__setattr__(self, "day_profiles", g)

    @property
    def m(self) -> int:
        return self.day_profiles.shape[1]

    @property
    def stationary(self) -> bool:
        return abs(self.ar_slope) < 1


@dataclass(frozen=True)
class AddParams:
    grand_mean: float
    day_intercepts: np.ndarray
    ar_slope: float
    innovation_sd: float
    interval_effects: np.ndarray
    interactions: np.ndarray

    def __post_init__(self):
        a = _arr(self.day_intercepts, (5,))
        b = _arr(self.interval_effects).reshape(-1)
        g = np.atleast_2d(_arr(self.interactions))
        if g.shape != (5, b.shape[0]):
            raise DataError(f"interactions must be 5 x {b.shape[0]}")
        if abs(b.sum()) > _TOL * max(1.0, np.abs(b).sum()):
            raise DataError("interval effects must sum to 0")
        scale = max(1.0, np.abs(g).sum())
        if np.any(np.abs(g.sum(axis=0)) > _TOL * scale) or np.any(np.abs(g.sum(axis=1)) > _TOL * scale):
            raise DataError("interactions must sum to 0 over days and over intervals")
        if self.innovation_sd < 0:
            raise DataError("innovation sd must be >= 0")
        object.__setattr__(self, "day_intercepts", a)
        object.__setattr__(self, "interval_effects", b)
        object.__setattr__(self, "interactions", g)

    @property
    def m(self) -> int:
        return self.interval_effects.shape[0]


def params_to_json(params) -> str:
    doc = {"model": "MUL" if isinstance(params, MulParams) else "ADD"}
    for k, v in asdict(params).items():
        doc[k] = np.asarray(v).tolist() if isinstance(v, np.ndarray) else v
    return json.dumps(doc, indent=1) + "\n"


def params_from_json(text: str):
    doc = json.loads(text)
    kind = str(doc.pop("model", "")).upper()
    try:
        if kind == "MUL":
            return MulParams(**doc)
        if kind == "ADD":
            return AddParams(**doc)
    except TypeError as exc:
        raise DataError(f"bad parameter file: {exc}") from exc
    raise DataError("parameter file must declare model MUL or ADD")


def load_demo_params(kind: str = "MUL"):
    """Shipped synthetic parameters (call-centre scale; not estimated from real data)."""
    name = {"MUL": "mul_demo.json", "ADD": "add_demo.json"}[kind.upper()]
    return params_from_json(resources.files("ratefactor.data").joinpath(name).read_text())


def _day_level_path(a, b, sd, days, rng):
    n = days.shape[0]
    eta = rng.standard_normal(n) * sd
    dev = np.empty(n)
    start_sd = sd / np.sqrt(1 - b * b) if abs(b) < 1 else sd
    dev[0] = eta[0] * (start_sd / sd) if sd > 0 else 0.0
    for i in range(1, n):
        dev[i] = b * dev[i - 1] + eta[i]
    return a[days - 1] + dev


def _dates(n, start_day):
    # 2024-01-01 was a Monday
    d = _dt.date(2024, 1, 1) + _dt.timedelta(days=int(start_day) - 1)
    out = []
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d.isoformat())
        d += _dt.timedelta(days=1)
    return tuple(out)


@dataclass(frozen=True)
class Simulation:
    counts: CountMatrix
    rates: np.ndarray
    clamped_cells: int = 0

    def __iter__(self):
        return iter((self.counts, self.rates))


def generate_mul(params: MulParams, n_days: int, start_day: int = 1, seed: int = 0) -> Simulation:
    """Counts and hidden rates from the multiplicative model."""
    if int(start_day) not in WEEKDAYS:
        raise DataError("start_day must be in 1..5")
    rng = np.random.default_rng(seed)
    days = weekday_sequence(start_day, n_days)
    alpha = _day_level_path(params.day_intercepts, params.ar_slope, params.innovation_sd, days, rng)
    if params.shock_sd > 0:
        alpha = alpha * np.exp(params.shock_sd * rng.standard_normal(n_days))
    root = alpha[:, None] * params.day_profiles[days - 1]
    rates = np.maximum(root**2, RATE_FLOOR)
    counts = rng.poisson(rates)
    cm = CountMatrix(counts, days, quarter_hour_labels(params.m), _dates(n_days, start_day))
    return Simulation(cm, rates, 0)


def generate_add(params: AddParams, n_days: int, start_day: int = 1, seed: int = 0) -> Simulation:
    """Counts and hidden rates from the additive model; nonpositive roots are clamped."""
    if int(start_day) not in WEEKDAYS:
        raise DataError("start_day must be in 1..5")
    rng = np.random.default_rng(seed)
    days = weekday_sequence(start_day, n_days)
    alpha = _day_level_path(params.day_intercepts, params.ar_slope, params.innovation_sd, days, rng)
    root = params.grand_mean + alpha[:, None] + params.interval_effects[None, :] + params.interactions[days - 1]
    floor = np.sqrt(RATE_FLOOR)
    clamped = int(np.sum(root <= floor))
    rates = np.maximum(root, floor) ** 2
    counts = rng.poisson(rates)
    cm = CountMatrix(counts, days, quarter_hour_labels(params.m), _dates(n_days, start_day))
    return Simulation(cm, rates, clamped)


def simulate(params, n_days: int, start_day: int = 1, seed: int = 0) -> Simulation:
    if isinstance(params, MulParams):
        return generate_mul(params, n_days, start_day, seed)
    return generate_add(params, n_days, start_day, seed)


# ---------------------------------------------------------------------------
# Gaussian-approximation fits (forecasting baselines)
# ---------------------------------------------------------------------------

def _weekday_ar(levels, days):
    """Weekday means and pooled AR(1) slope of the deviations."""
    a = np.array([levels[days == d].mean() for d in WEEKDAYS])
    dev = levels - a[days - 1]
    den = float(dev[:-1] @ dev[:-1])
    b = float(dev[1:] @ dev[:-1]) / den if den > 0 else 0.0
    return a, b, dev


@dataclass(frozen=True)
class TwoWayFit:
    model: str
    day_means: np.ndarray
    ar_slope: float
    last_deviation: float
    last_day: int
    profiles: np.ndarray = field(default=None)  # MUL: 5 x m, rows sum to 1
    grand_mean: float = 0.0
    interval_effects: np.ndarray = field(default=None)
    interactions: np.ndarray = field(default=None)

    def forecast_root(self, h: int = 1) -> np.ndarray:
        day = next_weekday(self.last_day, h)
        level = self.day_means[day - 1] + self.ar_slope**h * self.last_deviation
        if self.model == "MUL":
            return level * self.profiles[day - 1]
        return self.grand_mean + level + self.interval_effects + self.interactions[day - 1]

    def forecast(self, h: int = 1) -> np.ndarray:
        """Rate forecast ``h`` weekdays past the last fitted day."""
        return np.maximum(self.forecast_root(h) ** 2, RATE_FLOOR)


def fit_two_way_gaussian(counts: CountMatrix, model: str = "MUL") -> TwoWayFit:
    """Least-squares fit of MUL or ADD to ``sqrt(y + 1/4)``, which is roughly N(sqrt(lambda), 1/4)."""
    model = model.upper()
    if model not in ("MUL", "ADD"):
        raise DataError("model must be MUL or ADD")
    if counts.n < 15:
        raise DataError(f"need at least 15 days, got {counts.n}")
    days = counts.day_labels
    missing = [d for d in WEEKDAYS if not np.any(days == d)]
    if missing:
        raise DataError(f"weekday(s) {missing} missing from the data")
    x = np.sqrt(counts.values + 0.25)
    if model == "MUL":
        level = x.sum(axis=1)
        shares = x / level[:, None]
        prof = np.vstack([shares[days == d].mean(axis=0) for d in WEEKDAYS])
        prof /= prof.sum(axis=1, keepdims=True)
        a, b, dev = _weekday_ar(level, days)
        return TwoWayFit("MUL", a, b, float(dev[-1]), int(days[-1]), profiles=prof)
    mu = float(x.mean())
    alpha = x.mean(axis=1) - mu
    beta = x.mean(axis=0) - mu
    resid = x - mu - alpha[:, None] - beta[None, :]
    gam = np.vstack([resid[days == d].mean(axis=0) for d in WEEKDAYS])
    gam = gam - gam.mean(axis=0, keepdims=True) - gam.mean(axis=1, keepdims=True) + gam.mean()
    a, b, dev = _weekday_ar(alpha, days)
    return TwoWayFit("ADD", a, b, float(dev[-1]), int(days[-1]), grand_mean=mu, interval_effects=beta, interactions=gam)


# ---------------------------------------------------------------------------
# shipped demo parameters
# ---------------------------------------------------------------------------

def _bump(t, centre, width):
    return np.exp(-0.5 * ((t - centre) / width) ** 2)


def build_demo_mul(m: int = 68) -> MulParams:
    """Five weekday profiles sharing one bimodal shape plus four weekday contrasts.

    The contrasts have decreasing strength, so the weekday mean root-rate
    matrix has full rank 5 with a decaying spectrum.
    """
    t = 7.0 + 0.25 * (np.arange(m) + 0.5)
    common = _bump(t, 10.75, 1.6) + 0.85 * _bump(t, 14.5, 2.2) + 0.25 * _bump(t, 19.0, 2.5) + 0.06
    contrasts = np.vstack([
        _bump(t, 9.5, 1.3) - _bump(t, 15.5, 1.8),  # morning vs afternoon
        _bump(t, 19.5, 1.8) - 0.5 * _bump(t, 12.0, 2.5),  # evening
        _bump(t, 12.5, 0.7) - 0.5 * _bump(t, 8.0, 0.8),  # lunch
        _bump(t, 16.5, 0.9) - _bump(t, 11.0, 0.9),  # late afternoon
    ])
    contrasts /= np.linalg.norm(contrasts, axis=1, keepdims=True)
    # orthonormal weekday contrasts (each column sums to zero)
    days = np.array([
        [0.632, 0.0, 0.365, 0.0],
        [0.316, -0.447, -0.548, 0.5],
        [0.0, 0.894, 0.0, 0.0],
        [-0.316, -0.0, -0.548, -0.5],
        [-0.632, -0.447, 0.730, 0.0],
    ])
    days, _ = np.linalg.qr(days - days.mean(axis=0))
    strength = np.array([24.0, 12.0, 6.0, 1.5])
    base = 1050.0
    level = base * np.array([1.08, 1.02, 1.0, 0.98, 0.92])
    mean_root = level[:, None] * common[None, :] / common.sum()
    root = mean_root + (days * strength) @ contrasts
    prof = np.maximum(root, 1e-3)
    prof /= prof.sum(axis=1, keepdims=True)
    return MulParams(level, 0.95, 40.0, prof)


def build_demo_add(m: int = 68) -> AddParams:
    mul = build_demo_mul(m)
    root = mul.day_intercepts[:, None] * mul.day_profiles  # 5 x m weekday mean roots
    mu = float(root.mean())
    a = root.mean(axis=1) - mu
    beta = root.mean(axis=0) - mu
    gam = root - mu - a[:, None] - beta[None, :]
    gam = gam - gam.mean(axis=0, keepdims=True) - gam.mean(axis=1, keepdims=True) + gam.mean()
    beta = beta - beta.mean()
    return AddParams(mu, a, 0.6, 30.0 / m, beta, gam)
