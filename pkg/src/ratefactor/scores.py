"""Time-series models for factor-score series and rate-profile forecasts.

Each score series follows a varying-intercept AR(1)::

    beta[i, k] = a_k(day[i-1]) + b_k * beta[i-1, k] + eps[i, k]

fitted per factor by least squares. Forecasts run the recursion forward with
zero innovations (point) or with resampled residuals (bootstrap paths).
"""

from __future__ import annotations

import io
import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .core import DataError, FactorModel, WEEKDAYS, _floats, apply_factor_model, next_weekday

QUANTILE_METHOD = "linear"


@dataclass(frozen=True)
class ScoreForecastModel:
    intercepts: np.ndarray  # (K, 5), column d-1 holds a_k(d)
    slopes: np.ndarray  # (K,)
    residuals: np.ndarray  # (n-1, K)
    residual_sd: np.ndarray  # (K,)
    last_scores: np.ndarray  # (K,)
    last_day: int

    @property
    def K(self) -> int:
        return self.slopes.shape[0]

    @property
    def nonstationary(self) -> np.ndarray:
        return np.abs(self.slopes) >= 1

    def to_json(self) -> str:
        doc = {
            "K": self.K,
            "intercepts": [_floats(row) for row in self.intercepts],
            "slopes": _floats(self.slopes),
            "residual_sd": _floats(self.residual_sd),
            "residuals": [_floats(row) for row in self.residuals],
            "last_scores": _floats(self.last_scores),
            "last_day": int(self.last_day),
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ScoreForecastModel":
        try:
            doc = json.loads(text)
            K = int(doc["K"])
            return cls(
                np.asarray(doc["intercepts"], dtype=float).reshape(K, 5),
                np.asarray(doc["slopes"], dtype=float).reshape(K),
                np.asarray(doc["residuals"], dtype=float).reshape(-1, K),
                np.asarray(doc["residual_sd"], dtype=float).reshape(K),
                np.asarray(doc["last_scores"], dtype=float).reshape(K),
                int(doc["last_day"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"malformed score model document: {exc}") from exc


def _lag_design(series, days, varying_slope=False):
    days = np.asarray(days, dtype=np.int64)
    prev_days = days[:-1]
    missing = [d for d in WEEKDAYS if d not in set(prev_days.tolist())]
    if missing:
        raise DataError(f"weekday(s) {missing} never appear as a lagged day; intercepts are not estimable")
    dummies = (prev_days[:, None] == np.array(WEEKDAYS)[None, :]).astype(float)
    lag = np.asarray(series, dtype=float)[:-1]
    if varying_slope:
        X = np.hstack([dummies, dummies * lag[:, None]])
    else:
        X = np.hstack([dummies, lag[:, None]])
    return X


def fit_score_model(scores, day_labels) -> ScoreForecastModel:
    """Least-squares varying-intercept AR(1) fit for every score column."""
    B = np.asarray(scores, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    days = np.asarray(day_labels, dtype=np.int64).reshape(-1)
    n, K = B.shape
    if days.shape[0] != n:
        raise DataError(f"{days.shape[0]} day labels for {n} score rows")
    if n < 8:
        raise DataError(f"need at least 8 days of scores, got {n}")
    a = np.empty((K, 5))
    b = np.empty(K)
    resid = np.empty((n - 1, K))
    sd = np.empty(K)
    for k in range(K):
        X = _lag_design(B[:, k], days)
        y = B[1:, k]
        coef = np.linalg.lstsq(X, y, rcond=None)[0]
        a[k] = coef[:5]
        b[k] = coef[5]
        resid[:, k] = y - X @ coef
        dof = max(n - 1 - 6, 1)
        sd[k] = np.sqrt(resid[:, k] @ resid[:, k] / dof)
    if np.any(np.abs(b) >= 1):
        warnings.warn("score AR(1) slope with |b| >= 1; forecasts may be nonstationary", RuntimeWarning, stacklevel=2)
    return ScoreForecastModel(a, b, resid, sd, B[-1].copy(), int(days[-1]))


def nested_slope_f_test(series, day_labels):
    """F test of day-specific AR slopes against one common slope.

    Returns ``(F, p_value)`` with ``(4, n - 11)`` degrees of freedom for
    five-weekday data.
    """
    y_all = np.asarray(series, dtype=float).reshape(-1)
    days = np.asarray(day_labels, dtype=np.int64).reshape(-1)
    X0 = _lag_design(y_all, days)
    X1 = _lag_design(y_all, days, varying_slope=True)
    y = y_all[1:]
    n_obs = y.shape[0]
    p0, p1 = np.linalg.matrix_rank(X0), np.linalg.matrix_rank(X1)
    df2 = n_obs - p1
    if df2 <= 0 or p1 <= p0:
        raise DataError("not enough observations for the day-specific slope model")
    rss0 = _rss(X0, y)
    rss1 = _rss(X1, y)
    df1 = p1 - p0
    # both models reproduce the series up to rounding: nothing to test
    if rss0 <= 1e-24 * max(float(y @ y), 1e-300) or rss0 - rss1 <= 1e-12 * rss0:
        return 0.0, 1.0
    if rss1 <= 0:
        return float("inf"), 0.0
    F = max((rss0 - rss1) / df1, 0.0) / (rss1 / df2)
    return float(F), float(stats.f.sf(F, df1, df2))


def _rss(X, y):
    coef = np.linalg.lstsq(X, y, rcond=None)[0]
    r = y - X @ coef
    return float(r @ r)


def _check_day(day):
    if int(day) not in WEEKDAYS:
        raise DataError(f"invalid day code {day!r}")
    return int(day)


def forecast_scores(model: ScoreForecastModel, last_scores=None, last_day=None, h: int = 1) -> np.ndarray:
    """h-step point forecast of the score vector (innovations set to zero)."""
    if h < 1:
        raise DataError("horizon must be >= 1")
    beta = np.asarray(model.last_scores if last_scores is None else last_scores, dtype=float).reshape(-1).copy()
    day = _check_day(model.last_day if last_day is None else last_day)
    for _ in range(h):
        beta = model.intercepts[:, day - 1] + model.slopes * beta
        day = next_weekday(day)
    return beta


def bootstrap_scores(model: ScoreForecastModel, h: int, n_boot: int, seed: int, last_scores=None, last_day=None) -> np.ndarray:
    """``n_boot`` h-step forecast paths with residuals resampled at every step.

    Replicate ``b`` draws from its own stream spawned off ``seed``, so the
    result does not depend on evaluation order.
    """
    if n_boot < 1:
        raise DataError("n_boot must be >= 1")
    beta0 = np.asarray(model.last_scores if last_scores is None else last_scores, dtype=float).reshape(-1)
    day0 = _check_day(model.last_day if last_day is None else last_day)
    R = model.residuals
    n_res, K = R.shape
    streams = np.random.SeedSequence(seed).spawn(n_boot)
    # draw indices per replicate: (h, K) residual rows, one per factor per step
    idx = np.empty((n_boot, h, K), dtype=np.int64)
    for b, ss in enumerate(streams):
        idx[b] = np.random.default_rng(ss).integers(0, n_res, size=(h, K))
    out = np.tile(beta0, (n_boot, 1))
    day = day0
    cols = np.arange(K)
    for step in range(h):
        out = model.intercepts[:, day - 1] + model.slopes * out + R[idx[:, step, :], cols]
        day = next_weekday(day)
    return out


@dataclass(frozen=True)
class RateForecast:
    h: int
    point_scores: np.ndarray
    point_rates: np.ndarray
    ensemble: np.ndarray | None = None
    ensemble_scores: np.ndarray | None = None
    count_draws: np.ndarray | None = None
    seed: int = 0
    day_label: int | None = None

    @property
    def n_boot(self) -> int:
        return 0 if self.ensemble is None else self.ensemble.shape[0]

    def quantiles(self, levels=(0.05, 0.5, 0.95)) -> np.ndarray:
        if self.ensemble is None:
            raise DataError("forecast has no bootstrap ensemble")
        return np.quantile(self.ensemble, levels, axis=0, method=QUANTILE_METHOD)

    def to_json(self) -> str:
        doc = {
            "h": int(self.h),
            "day_label": None if self.day_label is None else int(self.day_label),
            "point_scores": _floats(self.point_scores),
            "point_rates": _floats(self.point_rates),
            "seed": int(self.seed),
            "n_boot": self.n_boot,
        }
        if self.ensemble is not None:
            q = self.quantiles()
            doc["quantiles"] = {"p05": _floats(q[0]), "p50": _floats(q[1]), "p95": _floats(q[2])}
            doc["ensemble_scores"] = [_floats(r) for r in self.ensemble_scores]
        return json.dumps(doc, indent=1) + "\n"

    def ensemble_csv(self) -> str:
        if self.ensemble is None:
            raise DataError("forecast has no bootstrap ensemble")
        out = io.StringIO()
        m = self.ensemble.shape[1]
        out.write("replicate," + ",".join(f"rate{j + 1}" for j in range(m)) + "\n")
        for b, row in enumerate(self.ensemble):
            out.write(f"{b}," + ",".join(format(float(v), ".17g") for v in row) + "\n")
        return out.getvalue()

    @classmethod
    def from_json(cls, text: str) -> "RateForecast":
        try:
            doc = json.loads(text)
            ens_scores = doc.get("ensemble_scores")
            return cls(
                int(doc["h"]),
                np.asarray(doc["point_scores"], dtype=float),
                np.asarray(doc["point_rates"], dtype=float),
                None,
                None if ens_scores is None else np.asarray(ens_scores, dtype=float),
                None,
                int(doc.get("seed", 0)),
                doc.get("day_label"),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"malformed forecast document: {exc}") from exc


def forecast_rates(factor_model: FactorModel, score_model: ScoreForecastModel, h: int = 1, n_boot: int | None = None, seed: int = 0) -> RateForecast:
    """Point (and optionally bootstrap) forecast of the rate profile h days ahead."""
    if factor_model.K != score_model.K:
        raise DataError(f"factor model has K={factor_model.K}, score model K={score_model.K}")
    point = forecast_scores(score_model, h=h)
    rates = apply_factor_model(factor_model, point)
    day = next_weekday(score_model.last_day, h)
    if n_boot is None:
        return RateForecast(h, point, rates, seed=seed, day_label=day)
    if n_boot < 1:
        raise DataError("n_boot must be >= 1")
    ens_scores = bootstrap_scores(score_model, h, n_boot, seed)
    ens = factor_model.link.inverse(ens_scores @ factor_model.loadings.T)
    draw_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(n_boot + 1)[-1])
    counts = draw_rng.poisson(ens)
    return RateForecast(h, point, rates, ens, ens_scores, counts, seed, day)
