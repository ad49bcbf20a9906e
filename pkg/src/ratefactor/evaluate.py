"""Rolling-origin forecast evaluation.

For each of the last ``test_days`` days the preceding ``train_window`` days
are used to fit every method, and the day's forecast is scored against the
hidden rates (simulation) and/or against oracle staffing built from the
realised counts. Updating methods additionally see the first ``m0`` counts of
the forecast day and nothing else from it.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .core import CountMatrix, DataError, NumericError, as_link
from .factor import AmlConfig, fit_factor_model
from .scores import bootstrap_scores, fit_score_model, forecast_scores
from .simgen import fit_two_way_gaussian, simulate
from .staffing import StaffingParams, staffing_level
from .update import PartialDay, PenalizedUpdateConfig, hp_update, one_step_bootstrap_update, penalized_update, select_omega

QUANTILE_METHOD = "linear"  # type-7 sample quantiles
_METHOD_RE = re.compile(r"^(TS|PML)(\d+)$|^(MUL|ADD|HPM|HPA)$")


def rmse_mre(truth, forecast):
    """``(RMSE, MRE in percent)`` of a forecast profile."""
    lam = np.asarray(truth, dtype=float).reshape(-1)
    fc = np.asarray(forecast, dtype=float).reshape(-1)
    if lam.shape != fc.shape:
        raise DataError(f"shape mismatch {lam.shape} vs {fc.shape}")
    if np.any(lam < 1e-8):
        raise NumericError("relative error needs truth > 0 everywhere")
    d = fc - lam
    return math.sqrt(float(np.mean(d * d))), 100.0 * float(np.mean(np.abs(d) / lam))


def _rmse(truth, forecast):
    d = np.asarray(forecast, float) - np.asarray(truth, float)
    return math.sqrt(float(np.mean(d * d)))


def empirical_cdf(samples):
    """Sorted distinct values with the fraction of samples at or below each."""
    x = np.sort(np.asarray(samples, dtype=float).reshape(-1))
    if x.size == 0:
        raise DataError("empirical CDF of an empty sample")
    vals = np.unique(x)
    probs = np.searchsorted(x, vals, side="right") / x.size
    return vals, probs


def ecdf_csv(samples_by_method: dict) -> str:
    out = io.StringIO()
    out.write("method,value,cdf\n")
    for name, samples in samples_by_method.items():
        v, p = empirical_cdf(samples)
        for a, b in zip(v, p):
            out.write(f"{name},{a:.17g},{b:.17g}\n")
    return out.getvalue()


def interval_report(ensembles, truth, level: float = 0.95):
    """Coverage and mean width of central ensemble intervals.

    ``ensembles`` holds one ``(n_boot, m)`` array per day, ``truth`` one row per
    day. Returns ``(mean coverage, mean width, per-day coverage, per-day width)``.
    """
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    if len(ensembles) != truth.shape[0]:
        raise DataError(f"{len(ensembles)} ensembles for {truth.shape[0]} days")
    tail = (1.0 - level) / 2.0
    cov, wid = [], []
    for ens, t in zip(ensembles, truth):
        ens = np.atleast_2d(np.asarray(ens, dtype=float))
        if ens.shape[1] != t.shape[0]:
            raise DataError("ensemble width does not match truth")
        lo, hi = np.quantile(ens, (tail, 1 - tail), axis=0, method=QUANTILE_METHOD)
        cov.append(float(np.mean((t >= lo) & (t <= hi))))
        wid.append(float(np.mean(hi - lo)))
    return float(np.mean(cov)), float(np.mean(wid)), np.array(cov), np.array(wid)


@dataclass(frozen=True)
class RollingSpec:
    train_window: int = 150
    test_days: int = 20
    methods: tuple = ("TS1", "TS2", "TS3", "TS4", "MUL", "ADD")
    update_cut: int | None = None
    mask_cut: int | None = None
    omega: float | str = "auto"
    omega_grid: tuple = PenalizedUpdateConfig().omega_grid
    link: str = "sqrt"
    n_boot: int | None = None
    level: float = 0.95
    refit_each_day: bool = True

    def __post_init__(self):
        for name in self.methods:
            if not _METHOD_RE.match(name):
                raise DataError(f"unknown method {name!r}")
        needs_cut = [m for m in self.methods if m.startswith(("PML", "HP"))]
        if needs_cut and self.update_cut is None:
            raise DataError(f"methods {needs_cut} need an update cut")
        if self.train_window < 15 or self.test_days < 1:
            raise DataError("train_window must be >= 15 and test_days >= 1")

    def first_scored_interval(self) -> int:
        return max(self.update_cut or 0, self.mask_cut or 0)


@dataclass
class MetricReport:
    records: list = field(default_factory=list)  # (replicate, day, method, metric, value)
    omega: float | None = None

    def add(self, replicate, day, method, metric, value):
        self.records.append((int(replicate), int(day), str(method), str(metric), float(value)))

    def extend(self, other: "MetricReport"):
        self.records.extend(other.records)

    def values(self, method: str, metric: str, replicate: int | None = None) -> np.ndarray:
        return np.array([r[4] for r in self.records if r[2] == method and r[3] == metric and (replicate is None or r[0] == replicate)])

    def mean_by_replicate(self, method: str, metric: str) -> dict:
        reps = sorted({r[0] for r in self.records})
        return {k: float(np.mean(self.values(method, metric, k))) for k in reps if self.values(method, metric, k).size}

    def methods(self):
        return list(dict.fromkeys(r[2] for r in self.records))

    def metrics(self):
        return list(dict.fromkeys(r[3] for r in self.records))

    def summary(self) -> dict:
        out = {}
        for meth in self.methods():
            out[meth] = {}
            for met in self.metrics():
                v = self.values(meth, met)
                v = v[np.isfinite(v)]
                if v.size == 0:
                    continue
                q1, med, q3 = np.quantile(v, (0.25, 0.5, 0.75), method=QUANTILE_METHOD)
                out[meth][met] = {"mean": float(v.mean()), "median": float(med), "q1": float(q1), "q3": float(q3), "count": int(v.size)}
        return out

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["replicate", "day", "method", "metric", "value"])
        for r in self.records:
            w.writerow([r[0], r[1], r[2], r[3], format(r[4], ".17g")])
        return out.getvalue()

    def summary_json(self) -> str:
        doc = {"summary": self.summary()}
        if self.omega is not None:
            doc["omega"] = self.omega
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"


class _DayForecaster:
    """Fits every requested method on one training window and forecasts the next day."""

    def __init__(self, train: CountMatrix, spec: RollingSpec, omega, seed):
        self.train = train
        self.spec = spec
        self.link = as_link(spec.link)
        self.omega = omega
        self.seed = seed
        self._factor = {}
        self._twoway = {}

    def factor(self, K):
        if K not in self._factor:
            fm = fit_factor_model(self.train, AmlConfig(K=K, link=self.link))
            sm = fit_score_model(fm.scores, self.train.day_labels)
            beta = forecast_scores(sm)
            ens = None
            if self.spec.n_boot:
                ens = bootstrap_scores(sm, 1, self.spec.n_boot, self.seed)
            self._factor[K] = (fm, sm, beta, ens)
        return self._factor[K]

    def twoway(self, kind):
        if kind not in self._twoway:
            self._twoway[kind] = fit_two_way_gaussian(self.train, kind).forecast(1)
        return self._twoway[kind]

    def forecast(self, method, partial: PartialDay | None):
        """Return ``(full-day point rates, ensemble over the scored intervals or None)``."""
        start = self.spec.first_scored_interval()
        if method.startswith("TS"):
            fm, _, beta, ens = self.factor(int(method[2:]))
            rates = fm.link.inverse(fm.loadings @ beta)
            ens_rates = None if ens is None else fm.link.inverse(ens @ fm.loadings[start:].T)
            return rates, ens_rates
        if method in ("MUL", "ADD"):
            return self.twoway(method), None
        if method in ("HPM", "HPA"):
            base = self.twoway("MUL" if method == "HPM" else "ADD")
            if partial is None:
                return base, None
            latter, _ = hp_update(base, partial)
            return np.concatenate([base[: partial.m0], latter]), None
        K = int(method[3:])
        fm, _, beta, ens = self.factor(K)
        ts_rates = fm.link.inverse(fm.loadings @ beta)
        if partial is None:
            ens_rates = None if ens is None else fm.link.inverse(ens @ fm.loadings[start:].T)
            return ts_rates, ens_rates
        cfg = PenalizedUpdateConfig(omega=self.omega, omega_grid=self.spec.omega_grid)
        up = penalized_update(fm, partial, beta, cfg, omega=self.omega)
        rates = np.concatenate([ts_rates[: partial.m0], up.latter_rates])
        ens_rates = None
        if ens is not None:
            boot = one_step_bootstrap_update(fm, partial, up, ens, cfg, seed=self.seed)
            ens_rates = boot.ensemble[:, start - partial.m0 :]
        return rates, ens_rates


def run_rolling_exercise(counts: CountMatrix, hidden_rates=None, spec: RollingSpec | None = None, staffing: StaffingParams | None = None, seed: int = 0, replicate: int = 0) -> MetricReport:
    """Rolling one-day-ahead exercise over the last ``spec.test_days`` days."""
    spec = spec or RollingSpec()
    n, m = counts.n, counts.m
    if spec.train_window + spec.test_days > n:
        raise DataError(f"{n} days cannot hold train_window={spec.train_window} + test_days={spec.test_days}")
    if hidden_rates is None and staffing is None:
        raise DataError("need hidden rates (simulation mode) or staffing parameters (oracle mode)")
    if hidden_rates is not None:
        hidden_rates = np.asarray(hidden_rates, dtype=float)
        if hidden_rates.shape != (n, m):
            raise DataError("hidden rates do not match the count matrix")
    cut = spec.update_cut
    start = spec.first_scored_interval()
    if start >= m:
        raise DataError("no intervals left to score after the cut")
    first_test = n - spec.test_days
    omega = None
    if any(meth.startswith("PML") for meth in spec.methods) and cut:
        if spec.omega == "auto":
            K = max(int(meth[3:]) for meth in spec.methods if meth.startswith("PML"))
            history = counts.rows(0, first_test)
            omega = select_omega(history, cut, PenalizedUpdateConfig(omega_grid=spec.omega_grid), K=K, link=spec.link, seed=seed).omega
        else:
            omega = float(spec.omega)
    report = MetricReport(omega=omega)
    day_seeds = np.random.SeedSequence(seed).spawn(spec.test_days)
    for t, i in enumerate(range(first_test, n)):
        train = counts.rows(i - spec.train_window, i)
        assert train.n == spec.train_window and i - spec.train_window >= 0
        day_seed = int(day_seeds[t].generate_state(1, np.uint64)[0])
        fc = _DayForecaster(train, spec, omega, day_seed)
        partial = None
        if cut:
            partial = PartialDay.from_row(counts.values[i], cut, int(counts.day_labels[i]))
        actual = counts.values[i].astype(float)
        for meth in spec.methods:
            rates, ens = fc.forecast(meth, partial)
            window = slice(start, m)
            if hidden_rates is not None:
                truth = hidden_rates[i, window]
                r, e = rmse_mre(truth, rates[window])
                report.add(replicate, i, meth, "rate_rmse", r)
                report.add(replicate, i, meth, "rate_mre", e)
                if ens is not None:
                    cov, wid, _, _ = interval_report([ens], truth[None, :], spec.level)
                    report.add(replicate, i, meth, "coverage", cov)
                    report.add(replicate, i, meth, "width", wid)
            if staffing is not None:
                oracle = staffing_level(np.maximum(actual[window], 1e-12), staffing).agents
                plan = staffing_level(rates[window], staffing, ensemble=ens, level=spec.level)
                report.add(replicate, i, meth, "staff_rmse", _rmse(oracle, plan.agents))
                if np.all(actual[window] > 0):
                    report.add(replicate, i, meth, "staff_mre", 100.0 * float(np.mean(np.abs(plan.agents - oracle) / oracle)))
                if ens is not None:
                    report.add(replicate, i, meth, "staff_width", float(np.mean(plan.upper - plan.lower)))
    return report


def simulation_study(params, n_reps: int, spec: RollingSpec, seed: int = 0, n_days: int | None = None, staffing: StaffingParams | None = None) -> MetricReport:
    """Repeat the rolling exercise on ``n_reps`` independently simulated data sets."""
    n_days = n_days or spec.train_window + spec.test_days
    report = MetricReport()
    for r, ss in enumerate(np.random.SeedSequence(seed).spawn(n_reps)):
        data_seed, run_seed = (int(s) for s in ss.generate_state(2, np.uint64))
        sim = simulate(params, n_days, seed=data_seed)
        rep = run_rolling_exercise(sim.counts, sim.rates, spec, staffing, seed=run_seed, replicate=r)
        report.extend(rep)
        if rep.omega is not None:
            report.omega = rep.omega
    return report
