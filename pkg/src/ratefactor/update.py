"""Within-day forecast updating.

After the first ``m0`` intervals of a day are observed, the score vector of
that day is re-estimated by penalized Poisson regression of the early counts
on the early loading rows, shrunk toward the time-series score forecast::

    C(beta) = sum_j (lambda_j - y_j log lambda_j) + omega * ||beta - beta_ts||^2

The minimiser is found by iteratively reweighted least squares on a
second-order expansion of the likelihood term. Proportional rescaling of a
base forecast (``hp_update``) is provided as a baseline.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import CountMatrix, DataError, FactorModel, Link, NumericError, _floats, as_link
from .factor import AmlConfig, fit_factor_model, fit_poisson_glm
from .scores import fit_score_model, forecast_scores

DEFAULT_OMEGA_GRID = (0.0,) + tuple(10.0**k for k in range(1, 10))


@dataclass(frozen=True)
class PartialDay:
    early_counts: np.ndarray
    m0: int
    day_label: int

    def __post_init__(self):
        y = np.asarray(self.early_counts).reshape(-1)
        if y.shape[0] != self.m0:
            raise DataError(f"{y.shape[0]} early counts for cut m0={self.m0}")
        if self.m0 < 1:
            raise DataError("m0 must be >= 1")
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise DataError("early counts must be nonnegative integers")
        if int(self.day_label) not in (1, 2, 3, 4, 5):
            raise DataError(f"invalid day code {self.day_label!r}")
        object.__setattr__(self, "early_counts", y.astype(float))

    @classmethod
    def from_row(cls, row, m0: int, day_label: int) -> "PartialDay":
        row = np.asarray(row).reshape(-1)
        if not 1 <= m0 < row.shape[0] + 1:
            raise DataError(f"cut m0={m0} outside 1..{row.shape[0]}")
        return cls(row[:m0], m0, day_label)


@dataclass(frozen=True)
class PenalizedUpdateConfig:
    omega: float | str = "auto"
    omega_grid: tuple = DEFAULT_OMEGA_GRID
    max_iters: int = 50
    tol: float = 1e-9
    weight_floor: float = 1e-10

    def __post_init__(self):
        g = np.asarray(self.omega_grid, dtype=float)
        if g.size == 0 or np.any(g < 0) or np.any(np.diff(g) <= 0):
            raise ValueError("omega grid must be nonnegative and strictly increasing")
        if self.omega != "auto" and float(self.omega) < 0:
            raise ValueError("omega must be >= 0")


@dataclass(frozen=True)
class UpdatedForecast:
    scores: np.ndarray
    latter_rates: np.ndarray
    objective_value: float
    omega_used: float
    m0: int
    converged: bool = True
    iterations: int = 0
    ensemble: np.ndarray | None = None
    ensemble_scores: np.ndarray | None = None
    count_draws: np.ndarray | None = None

    def to_json(self) -> str:
        doc = {
            "m0": int(self.m0),
            "omega": float(self.omega_used),
            "scores": _floats(self.scores),
            "latter_rates": _floats(self.latter_rates),
            "objective": float(self.objective_value),
            "converged": bool(self.converged),
        }
        if self.ensemble is not None:
            q = np.quantile(self.ensemble, (0.05, 0.5, 0.95), axis=0, method="linear")
            doc["n_boot"] = int(self.ensemble.shape[0])
            doc["quantiles"] = {"p05": _floats(q[0]), "p50": _floats(q[1]), "p95": _floats(q[2])}
            doc["ensemble_scores"] = [_floats(r) for r in self.ensemble_scores]
        return json.dumps(doc, indent=1) + "\n"


def taylor_weights(link, y, eta0, weight_floor: float = 1e-10):
    """Weight and working response of the quadratic expansion at ``eta0``.

    ``(lambda - lambda0) - y (log lambda - log lambda0)`` is approximated by
    ``w * (eta - y_star)^2`` up to a constant:

    * square root: ``w = 1 + y/eta0^2``, ``y_star = eta0 - (eta0^3 - y eta0)/(eta0^2 + y)``
    * identity: ``w = y/(2 eta0^2)``, ``y_star = eta0 - (eta0^2 - y eta0)/y``
    * log: ``w = exp(eta0)/2``, ``y_star = eta0 - (1 - y exp(-eta0))``

    Weights are floored at ``weight_floor``. Works elementwise on arrays.
    """
    kind = as_link(link).kind
    y = np.asarray(y, dtype=float)
    e = np.asarray(eta0, dtype=float)
    if kind in ("sqrt", "identity") and np.any(e == 0):
        raise NumericError("expansion is singular at eta0 = 0")
    if kind == "sqrt":
        w = 1.0 + y / e**2
        ys = e - (e**3 - y * e) / (e**2 + y)
    elif kind == "identity":
        w = y / (2.0 * e**2)
        with np.errstate(divide="ignore", invalid="ignore"):
            ys = np.where(y > 0, e - (e**2 - y * e) / np.where(y > 0, y, 1.0), e - e)
        # y = 0: the likelihood term is linear, push toward the rate floor
        ys = np.where(y > 0, ys, 0.0)
    else:
        w = np.exp(e) / 2.0
        ys = e - (1.0 - y * np.exp(-e))
    w = np.maximum(w, weight_floor)
    if w.ndim == 0:
        return float(w), float(ys)
    return w, ys


def penalized_objective(link: Link, Fe, y, beta, beta_ts, omega) -> float:
    """Penalized negative log-likelihood (without the log y! constant)."""
    lam = link.inverse(Fe @ beta)
    return float(np.sum(lam - y * np.log(lam)) + omega * np.sum((beta - beta_ts) ** 2))


def closed_form_step(Fe, w, y_star, beta_ts, omega):
    """Minimiser of ``(y* - Fe b)' W (y* - Fe b) + omega ||b - beta_ts||^2``."""
    K = Fe.shape[1]
    A = Fe.T @ (w[:, None] * Fe) + omega * np.eye(K)
    rhs = Fe.T @ (w * y_star) + omega * np.asarray(beta_ts, dtype=float)
    return np.linalg.solve(A, rhs)


def _safe_eta(link, eta):
    if link.kind in ("sqrt", "identity"):
        tiny = 1e-4 if link.kind == "sqrt" else 1e-8
        return np.where(np.abs(eta) < tiny, np.where(eta < 0, -tiny, tiny), eta)
    return eta


def _irls(link, Fe, y, beta0, beta_ts, omega, cfg):
    beta = np.asarray(beta0, dtype=float).copy()
    obj = penalized_objective(link, Fe, y, beta, beta_ts, omega)
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        w, ys = taylor_weights(link, y, _safe_eta(link, Fe @ beta), cfg.weight_floor)
        try:
            cand = closed_form_step(Fe, w, ys, beta_ts, omega)
        except np.linalg.LinAlgError:
            break
        step = cand - beta
        t = 1.0
        accepted = False
        for _ in range(11):
            trial = beta + t * step
            val = penalized_objective(link, Fe, y, trial, beta_ts, omega)
            if np.isfinite(val) and val <= obj:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            converged = True  # no descent available from here
            break
        rel = abs(obj - val) / max(abs(val), 1.0)
        beta, obj = trial, val
        if rel < cfg.tol:
            converged = True
            break
    return beta, obj, converged, it


def _latter_rates(model, beta, m0):
    return model.link.inverse(model.loadings[m0:] @ beta)


def penalized_update(model: FactorModel, partial: PartialDay, ts_scores, cfg: PenalizedUpdateConfig | None = None, omega: float | None = None) -> UpdatedForecast:
    """Penalized-likelihood update of one day's score vector from its early counts."""
    cfg = cfg or PenalizedUpdateConfig(omega=0.0)
    if omega is None:
        if cfg.omega == "auto":
            raise DataError("omega='auto' must be resolved with select_omega first")
        omega = float(cfg.omega)
    if model.normalization != "scores-orthonormal":
        raise DataError("penalized updating needs a scores-orthonormal factor model")
    m, K = model.loadings.shape
    m0 = partial.m0
    if not 1 <= m0 <= m:
        raise DataError(f"m0={m0} outside 1..{m}")
    beta_ts = np.asarray(ts_scores, dtype=float).reshape(-1)
    if beta_ts.shape[0] != K:
        raise DataError(f"expected {K} time-series scores")
    Fe = np.asarray(model.loadings[:m0])
    y = partial.early_counts
    link = model.link
    full_rank = m0 >= K and np.linalg.matrix_rank(Fe) == K
    if not full_rank:
        if omega == 0:
            raise NumericError(f"unpenalized update needs m0 >= K and full-rank early loadings (m0={m0}, K={K})")
        beta0 = beta_ts
    else:
        beta0 = fit_poisson_glm(y, Fe, link, beta0=beta_ts, max_iter=cfg.max_iters, tol=1e-12, weight_floor=cfg.weight_floor).beta
    beta, obj, conv, it = _irls(link, Fe, y, beta0, beta_ts, omega, cfg)
    # the time-series anchor itself may beat a poor start
    ts_obj = penalized_objective(link, Fe, y, beta_ts, beta_ts, omega)
    if ts_obj < obj:
        beta, obj, conv, it2 = _irls(link, Fe, y, beta_ts, beta_ts, omega, cfg)
        it += it2
    return UpdatedForecast(beta, _latter_rates(model, beta, m0), obj, float(omega), m0, conv, it)


def one_step_bootstrap_update(model: FactorModel, partial: PartialDay, base: UpdatedForecast, ts_ensemble_scores, cfg: PenalizedUpdateConfig | None = None, seed: int = 0) -> UpdatedForecast:
    """Bootstrap PML ensemble: one reweighted solve from the point update per replicate.

    Weights and working responses are frozen at ``base.scores``, so every
    replicate shares the same system matrix and only the anchor changes.
    """
    cfg = cfg or PenalizedUpdateConfig(omega=base.omega_used)
    ens_ts = np.atleast_2d(np.asarray(ts_ensemble_scores, dtype=float))
    K = model.K
    if ens_ts.shape[1] != K:
        raise DataError(f"ensemble scores have {ens_ts.shape[1]} columns, expected {K}")
    if partial.m0 != base.m0:
        raise DataError("base update was computed at a different cut")
    m0 = partial.m0
    omega = base.omega_used
    Fe = np.asarray(model.loadings[:m0])
    w, ys = taylor_weights(model.link, partial.early_counts, _safe_eta(model.link, Fe @ base.scores), cfg.weight_floor)
    A = Fe.T @ (w[:, None] * Fe) + omega * np.eye(K)
    rhs = (Fe.T @ (w * ys))[None, :] + omega * ens_ts
    betas = np.linalg.solve(A, rhs.T).T
    rates = model.link.inverse(betas @ model.loadings[m0:].T)
    n_boot = betas.shape[0]
    draw_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(n_boot + 1)[-1])
    counts = draw_rng.poisson(rates)
    return replace(base, ensemble=rates, ensemble_scores=betas, count_draws=counts)


def hp_update(base_point_rates, partial: PartialDay):
    """Rescale the rest of the day by observed / forecast early volume.

    Returns ``(latter_rates, ratio)``.
    """
    lam = np.asarray(base_point_rates, dtype=float).reshape(-1)
    m0 = partial.m0
    if m0 >= lam.shape[0]:
        raise DataError("cut leaves no latter intervals")
    denom = float(np.sum(lam[:m0]))
    if not denom > 0:
        raise NumericError("cumulative early forecast is zero")
    ratio = float(np.sum(partial.early_counts)) / denom
    return ratio * lam[m0:], ratio


@dataclass(frozen=True)
class OmegaSelection:
    omega: float
    grid: tuple
    mean_rmse: tuple
    days_used: int = 0
    notes: tuple = field(default=())


def select_omega(history: CountMatrix, m0: int, cfg: PenalizedUpdateConfig | None = None, K: int = 4, link="sqrt", holdout_frac: float = 1 / 3, window: int | None = None, holdout: int | None = None, statistic: str = "rmse", seed: int = 0, tie_rtol: float = 1e-3) -> OmegaSelection:
    """Choose one penalty by rolling hold-out forecasting of latter-day counts.

    The last ``holdout`` days of ``history`` (default a third) are forecast one
    at a time. Each uses the preceding ``window`` days (default the rest) to fit
    the factor and score models; every grid value then updates the day from its
    first ``m0`` counts, and the value with the smallest average count error
    over intervals ``m0+1..m`` wins. Scores within ``tie_rtol`` (relative) of
    the best count as ties, and ties go to the largest penalty.
    """
    cfg = cfg or PenalizedUpdateConfig()
    grid = tuple(float(g) for g in cfg.omega_grid)
    if len(grid) == 1:
        return OmegaSelection(grid[0], grid, (float("nan"),))
    n = history.n
    if holdout is None:
        holdout = max(int(round(n * holdout_frac)), 1)
    if window is None:
        window = n - holdout
    if window < 8 or holdout < 1 or window + holdout > n:
        raise DataError(f"history of {n} days is too short for window={window}, holdout={holdout}")
    if not 1 <= m0 < history.m:
        raise DataError(f"m0={m0} outside 1..{history.m - 1}")
    link = as_link(link)
    errs = np.zeros((holdout, len(grid)))
    for t, i in enumerate(range(n - holdout, n)):
        train = history.rows(i - window, i)
        fm = fit_factor_model(train, AmlConfig(K=K, link=link))
        sm = fit_score_model(fm.scores, train.day_labels)
        beta_ts = forecast_scores(sm)
        row = history.values[i].astype(float)
        partial = PartialDay.from_row(row, m0, int(history.day_labels[i]))
        for g, om in enumerate(grid):
            try:
                up = penalized_update(fm, partial, beta_ts, cfg, omega=om)
                errs[t, g] = _count_error(up.latter_rates, row[m0:], statistic)
            except NumericError:
                errs[t, g] = np.inf
    mean = errs.mean(axis=0)
    slack = tie_rtol * mean.min() + 1e-9 * max(1.0, float(history.values.mean()))
    best = np.flatnonzero(mean <= mean.min() + slack)
    choice = max(grid[int(b)] for b in best)
    return OmegaSelection(choice, grid, tuple(float(v) for v in mean), holdout)


def _count_error(pred, actual, statistic):
    d = np.asarray(pred) - np.asarray(actual)
    if statistic == "rmse":
        return math.sqrt(float(np.mean(d * d)))
    if statistic == "mae":
        return float(np.mean(np.abs(d)))
    raise DataError(f"unknown statistic {statistic!r}")


__all__ = [
    "DEFAULT_OMEGA_GRID",
    "OmegaSelection",
    "PartialDay",
    "PenalizedUpdateConfig",
    "UpdatedForecast",
    "closed_form_step",
    "hp_update",
    "one_step_bootstrap_update",
    "penalized_objective",
    "penalized_update",
    "select_omega",
    "taylor_weights",
]
