"""Square-root safety staffing: ``N = R + theta * sqrt(R)`` with ``R = lambda / mu``."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .core import DataError, NumericError

THETA_MAX = 40.0


def _norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def _norm_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def delay_prob_from_theta(theta: float) -> float:
    """Steady-state delay probability ``1 / (1 + theta Phi(theta) / phi(theta))``."""
    theta = float(theta)
    if not theta > 0:
        raise DataError(f"theta must be > 0, got {theta}")
    pdf = _norm_pdf(theta)
    if pdf == 0.0:
        return 0.0  # density underflow, far beyond any practical theta
    return 1.0 / (1.0 + theta * _norm_cdf(theta) / pdf)


def theta_from_delay_prob(alpha: float) -> float:
    """Invert ``delay_prob_from_theta`` by bisection on ``(0, 40]``."""
    alpha = float(alpha)
    if not 0 < alpha < 1:
        raise DataError(f"delay probability must lie in (0, 1), got {alpha}")
    lo, hi = 0.0, THETA_MAX
    if alpha <= delay_prob_from_theta(hi):
        return hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if delay_prob_from_theta(mid) > alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class StaffingParams:
    service_rate: float
    theta: float | None = None
    delay_prob: float | None = None
    rounding: str = "none"

    def __post_init__(self):
        if not self.service_rate > 0:
            raise DataError("service rate must be > 0")
        if (self.theta is None) == (self.delay_prob is None):
            raise DataError("give exactly one of theta or delay_prob")
        if self.delay_prob is not None and not 0 < self.delay_prob <= 1:
            raise DataError("delay_prob must lie in (0, 1]")
        if self.rounding not in ("none", "ceil"):
            raise DataError("rounding must be 'none' or 'ceil'")

    @property
    def theta_value(self) -> float:
        if self.theta is not None:
            return float(self.theta)
        if self.delay_prob == 1:
            return 0.0
        return theta_from_delay_prob(self.delay_prob)


@dataclass(frozen=True)
class StaffingPlan:
    offered_load: np.ndarray
    agents: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    first_interval: int = 1

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("interval,offered_load,agents,lo95,hi95\n")
        for j, (r, a) in enumerate(zip(self.offered_load, self.agents)):
            lo = "" if self.lower is None else format(float(self.lower[j]), ".17g")
            hi = "" if self.upper is None else format(float(self.upper[j]), ".17g")
            out.write(f"{j + self.first_interval},{float(r):.17g},{float(a):.17g},{lo},{hi}\n")
        return out.getvalue()


def _agents(rates, params: StaffingParams, theta: float):
    R = rates / params.service_rate
    N = R + theta * np.sqrt(R)
    if params.rounding == "ceil":
        N = np.ceil(N - 1e-9)
    return R, N


def staffing_level(rates=None, params: StaffingParams | None = None, ensemble=None, level: float = 0.95, first_interval: int = 1) -> StaffingPlan:
    """Per-interval staffing from point rates and/or a rate ensemble.

    With an ensemble, every replicate row is mapped through the staffing rule
    first and the bounds are empirical quantiles of the resulting agent counts.
    Without point rates the plan is built from the ensemble median.
    """
    if params is None:
        raise DataError("staffing parameters are required")
    theta = params.theta_value
    if rates is None and ensemble is None:
        raise DataError("need point rates or an ensemble")
    if rates is None:
        ens = np.atleast_2d(np.asarray(ensemble, dtype=float))
        rates = np.quantile(ens, 0.5, axis=0, method="linear")
    lam = np.asarray(rates, dtype=float).reshape(-1)
    if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
        raise NumericError("rates must be finite and > 0")
    R, N = _agents(lam, params, theta)
    lo = hi = None
    if ensemble is not None:
        ens = np.atleast_2d(np.asarray(ensemble, dtype=float))
        if ens.shape[1] != lam.shape[0]:
            raise DataError("ensemble width does not match the rate profile")
        if not np.all(np.isfinite(ens)) or np.any(ens <= 0):
            raise NumericError("ensemble rates must be finite and > 0")
        _, N_ens = _agents(ens, params, theta)
        tail = (1.0 - level) / 2.0
        lo, hi = np.quantile(N_ens, (tail, 1.0 - tail), axis=0, method="linear")
    return StaffingPlan(R, N, lo, hi, first_interval)
