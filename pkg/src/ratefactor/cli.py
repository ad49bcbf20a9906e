"""Command-line interface: ``ratefactor <subcommand> ...``.

Exit codes: 0 success, 2 bad input (file, CSV or flag problems), 3 numerical
failure. Every output file is written to a temporary sibling and renamed into
place, so readers never see a half-written file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .core import CountMatrix, DataError, FactorModel, NumericError, _clock_key, counts_to_csv, grid_to_csv, read_counts_csv, read_grid_csv
from .evaluate import RollingSpec, run_rolling_exercise
from .factor import AmlConfig, deviance_reduction_table, fit_factor_model
from .scores import RateForecast, ScoreForecastModel, fit_score_model, forecast_rates
from .simgen import load_demo_params, params_from_json, simulate
from .staffing import StaffingParams, staffing_level
from .update import PartialDay, PenalizedUpdateConfig, hp_update, one_step_bootstrap_update, penalized_update, select_omega

DEFAULT_SEED = 20240601
log = logging.getLogger("ratefactor")


class InputError(DataError):
    pass


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------

def write_atomic(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    log.info("wrote %s", path)
    return path


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None


def _companion(path, suffix: str) -> Path:
    """``out/model.json`` -> ``out/model.<suffix>``."""
    p = Path(path)
    return p.with_name(p.stem + suffix)


def _counts(path) -> CountMatrix:
    if not Path(path).exists():
        raise InputError(f"cannot read {path}: no such file")
    try:
        return read_counts_csv(path)
    except DataError as exc:
        raise InputError(f"{path}: {exc}") from None


def _read_partial(path):
    """Last data row of a counts CSV: ``(labels, counts, dow)``.

    The row may be shorter than a full day; the header only needs to cover
    the columns that are present.
    """
    text = _read_text(path)
    rows = list(csv.reader(text.splitlines()))
    if not rows or len(rows[0]) < 3 or rows[0][0].strip().lower() != "date":
        raise InputError(f"{path}: line 1: header must start with date,dow")
    header = [h.strip() for h in rows[0]]
    body = [(i + 1, r) for i, r in enumerate(rows) if i > 0 and any(c.strip() for c in r)]
    if not body:
        raise InputError(f"{path}: no data row")
    lineno, rec = body[-1]
    if len(rec) > len(header):
        raise InputError(f"{path}: line {lineno}: {len(rec)} fields but the header has {len(header)}")
    try:
        dow = int(rec[1])
    except (ValueError, IndexError):
        raise InputError(f"{path}: line {lineno}, column 2: bad day-of-week") from None
    vals = []
    for col, cell in enumerate(rec[2:], start=3):
        try:
            v = int(cell)
        except ValueError:
            raise InputError(f"{path}: line {lineno}, column {col}: bad count {cell!r}") from None
        if v < 0:
            raise InputError(f"{path}: line {lineno}, column {col}: negative count")
        vals.append(v)
    return header[2:], np.array(vals, dtype=float), dow


def _cut_from_labels(labels, clock: str) -> int:
    try:
        key = _clock_key(clock)
        return sum(1 for s in labels if _clock_key(s) < key)
    except ValueError:
        raise InputError(f"cannot map --cut-time {clock!r} onto interval labels") from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    counts = _counts(args.input)
    out = Path(args.out or "model.json")
    if args.select_k is not None:
        if args.select_k < 1 or args.select_k > min(counts.n, counts.m):
            raise InputError(f"--select-k {args.select_k} infeasible for a {counts.n}x{counts.m} matrix")
        table = deviance_reduction_table(counts, args.select_k, AmlConfig(K=1, link=args.link))
        write_atomic(_companion(out, ".deviance.csv"), table.to_csv())
        K = table.suggest_k()
        log.info("suggested K=%d", K)
    else:
        K = args.factors
    if K < 1 or K > min(counts.n, counts.m):
        raise InputError(f"K={K} infeasible for a {counts.n}x{counts.m} matrix")
    model = fit_factor_model(counts, AmlConfig(K=K, link=args.link))
    for w in model.warnings:
        log.warning("%s", w)
    write_atomic(out, model.to_json())
    if counts.n >= 8:
        sm = fit_score_model(model.scores, counts.day_labels)
        write_atomic(args.scores_out or _companion(out, ".scores.json"), sm.to_json())
    else:
        log.warning("fewer than 8 days: no score model written")
    return 0


def _load_model(path) -> FactorModel:
    return FactorModel.from_json(_read_text(path))


def cmd_forecast(args) -> int:
    fm = _load_model(args.model)
    sm = ScoreForecastModel.from_json(_read_text(args.scores_model))
    if args.horizon < 1:
        raise InputError("--horizon must be >= 1")
    fc = forecast_rates(fm, sm, h=args.horizon, n_boot=args.bootstrap or None, seed=args.seed)
    out = args.out or "forecast.json"
    write_atomic(out, fc.to_json())
    if args.ensemble_csv and fc.ensemble is not None:
        write_atomic(args.ensemble_csv, fc.ensemble_csv())
    return 0


def cmd_update(args) -> int:
    fm = _load_model(args.model)
    fc = RateForecast.from_json(_read_text(args.forecast))
    labels, early, dow = _read_partial(args.partial)
    if args.cut is not None:
        m0 = args.cut
    elif args.cut_time is not None:
        m0 = _cut_from_labels(labels, args.cut_time)
    else:
        m0 = early.shape[0]
    if not 1 <= m0 <= early.shape[0]:
        raise InputError(f"cut m0={m0} but the partial day has {early.shape[0]} counts")
    if m0 >= fm.loadings.shape[0]:
        raise InputError(f"cut m0={m0} leaves no intervals to forecast")
    if fc.day_label is not None and int(fc.day_label) != dow:
        log.warning("forecast is for weekday %s but the partial day is weekday %s", fc.day_label, dow)
    partial = PartialDay(early[:m0], m0, dow)
    grid = PenalizedUpdateConfig().omega_grid
    if args.omega == "auto":
        if not args.history:
            raise InputError("--omega auto needs --history counts.csv")
        sel = select_omega(_counts(args.history), m0, PenalizedUpdateConfig(omega_grid=grid), K=fm.K, link=fm.link, seed=args.seed)
        omega = sel.omega
        log.info("selected omega=%g", omega)
    else:
        try:
            omega = float(args.omega)
        except ValueError:
            raise InputError(f"--omega must be 'auto' or a number, got {args.omega!r}") from None
        if omega < 0:
            raise InputError("--omega must be >= 0")
    cfg = PenalizedUpdateConfig(omega=omega)
    up = penalized_update(fm, partial, fc.point_scores, cfg)
    if fc.ensemble_scores is not None:
        up = one_step_bootstrap_update(fm, partial, up, fc.ensemble_scores, cfg, seed=args.seed)
    doc = json.loads(up.to_json())
    doc["day_label"] = dow
    if args.baseline == "hp":
        latter, ratio = hp_update(fc.point_rates, partial)
        doc["hp"] = {"ratio": float(f"{ratio:.17g}"), "latter_rates": [float(f"{v:.17g}") for v in latter]}
    write_atomic(args.out or "updated.json", json.dumps(doc, indent=1) + "\n")
    return 0


def cmd_staff(args) -> int:
    doc = json.loads(_read_text(args.forecast))
    if "latter_rates" in doc:
        rates = np.asarray(doc["latter_rates"], dtype=float)
        first = int(doc["m0"]) + 1
    elif "point_rates" in doc:
        rates = np.asarray(doc["point_rates"], dtype=float)
        first = 1
    else:
        raise InputError(f"{args.forecast}: neither a forecast nor an updated forecast")
    ensemble = None
    if args.model and doc.get("ensemble_scores"):
        fm = _load_model(args.model)
        F = fm.loadings[first - 1:]
        if F.shape[0] != rates.shape[0]:
            raise InputError("model does not match the forecast length")
        ensemble = fm.link.inverse(np.asarray(doc["ensemble_scores"], dtype=float) @ F.T)
    params = StaffingParams(args.service_rate, theta=args.theta, delay_prob=args.delay_prob, rounding=args.round)
    plan = staffing_level(rates, params, ensemble=ensemble, first_interval=first)
    write_atomic(args.out or "staffing.csv", plan.to_csv())
    return 0


def cmd_simulate(args) -> int:
    if args.params:
        params = params_from_json(_read_text(args.params))
    else:
        params = load_demo_params(args.model)
    if type(params).__name__[:3].lower() != args.model.lower()[:3]:
        raise InputError(f"parameter file describes a {type(params).__name__[:3]} model, not {args.model}")
    if args.days < 2:
        raise InputError("--days must be >= 2")
    sim = simulate(params, args.days, start_day=args.start_day, seed=args.seed)
    out = Path(args.out or "counts.csv")
    write_atomic(out, counts_to_csv(sim.counts))
    write_atomic(_companion(out, ".rates.csv"), grid_to_csv(sim.counts, sim.rates))
    if sim.clamped_cells:
        log.warning("%d cells clamped at the rate floor", sim.clamped_cells)
    return 0


def cmd_evaluate(args) -> int:
    counts = _counts(args.counts)
    rates = None
    if args.rates:
        if not Path(args.rates).exists():
            raise InputError(f"cannot read {args.rates}: no such file")
        rates = read_grid_csv(args.rates)
        if rates.shape != counts.values.shape:
            raise InputError(f"rates grid {rates.shape} does not match counts {counts.values.shape}")
    staffing = None
    if args.service_rate is not None:
        staffing = StaffingParams(args.service_rate, theta=args.theta, delay_prob=args.delay_prob, rounding=args.round)
    cut = args.cut
    if cut is None and args.cut_time:
        cut = counts.cut_index(args.cut_time)
    mask = args.mask_cut
    if mask is None and args.mask_time:
        mask = counts.cut_index(args.mask_time)
    omega = args.omega if args.omega == "auto" else float(args.omega)
    spec = RollingSpec(
        train_window=args.train_window,
        test_days=args.test_days,
        methods=tuple(s.strip().upper() for s in args.methods.split(",") if s.strip()),
        update_cut=cut,
        mask_cut=mask,
        omega=omega,
        link=args.link,
        n_boot=args.bootstrap or None,
    )
    report = run_rolling_exercise(counts, rates, spec, staffing, seed=args.seed)
    out = Path(args.out or "report.csv")
    write_atomic(out, report.to_csv())
    write_atomic(_companion(out, ".summary.json"), report.summary_json())
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"master random seed (default {DEFAULT_SEED})")
    p.add_argument("--link", choices=("identity", "log", "sqrt"), default="sqrt", help="link for new fits (default sqrt)")
    p.add_argument("--out", help="output path (companion files are named after it)")
    v = p.add_mutually_exclusive_group()
    v.add_argument("--quiet", action="store_true", help="errors only")
    v.add_argument("--verbose", action="store_true", help="progress messages")
    return p


def _staff_flags(p, required: bool):
    p.add_argument("--service-rate", type=float, required=required, help="calls one agent handles per interval")
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--theta", type=float, help="safety coefficient")
    g.add_argument("--delay-prob", type=float, help="target probability of delay")
    p.add_argument("--round", choices=("none", "ceil"), default="none", help="round agent counts up")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="ratefactor", description="Poisson factor-model forecasting of arrival-rate profiles.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common], help="fit a factor model and its score model")
    p.add_argument("input", help="counts CSV (date,dow,<interval labels>)")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--factors", type=int, help="number of factors K")
    g.add_argument("--select-k", type=int, metavar="KMAX", help="fit K=1..KMAX, write the deviance table and keep the suggested K")
    p.add_argument("--scores-out", help="score-model path (default <out>.scores.json)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("forecast", parents=[common], help="forecast a day's rate profile")
    p.add_argument("model")
    p.add_argument("scores_model")
    p.add_argument("--horizon", type=int, default=1, help="days ahead (default 1)")
    p.add_argument("--bootstrap", type=int, default=0, metavar="B", help="bootstrap replicates (default 0: point only)")
    p.add_argument("--ensemble-csv", help="also write the bootstrap rate ensemble here")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("update", parents=[common], help="revise a forecast from a day's early counts")
    p.add_argument("model")
    p.add_argument("forecast")
    p.add_argument("partial", help="CSV with the day's early counts (last data row is used)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--cut", type=int, metavar="M0", help="number of observed intervals")
    g.add_argument("--cut-time", metavar="HH:MM", help="observe intervals whose label is before this time")
    p.add_argument("--omega", default="auto", help="penalty value or 'auto' (default auto)")
    p.add_argument("--history", help="counts CSV used to choose omega when --omega auto")
    p.add_argument("--baseline", choices=("hp", "none"), default="none", help="also report the proportional-rescaling update")
    p.set_defaults(func=cmd_update)

    p = sub.add_parser("staff", parents=[common], help="square-root safety staffing from a forecast")
    p.add_argument("forecast", help="forecast.json or updated.json")
    p.add_argument("--model", help="factor model, needed for interval bounds from a bootstrap ensemble")
    _staff_flags(p, True)
    p.set_defaults(func=cmd_staff)

    p = sub.add_parser("simulate", parents=[common], help="simulate counts and hidden rates")
    p.add_argument("params", nargs="?", help="parameter JSON (default: shipped demo parameters)")
    p.add_argument("--model", choices=("mul", "add", "MUL", "ADD"), default="mul")
    p.add_argument("--days", type=int, default=170)
    p.add_argument("--start-day", type=int, default=1, choices=(1, 2, 3, 4, 5))
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", parents=[common], help="rolling one-day-ahead evaluation")
    p.add_argument("counts")
    p.add_argument("rates", nargs="?", help="hidden-rate CSV (simulation mode)")
    p.add_argument("--train-window", type=int, default=150)
    p.add_argument("--test-days", type=int, default=20)
    p.add_argument("--methods", default="TS1,TS2,TS3,TS4,MUL,ADD", help="comma list of TSk, PMLk, MUL, ADD, HPM, HPA")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--cut", type=int, metavar="M0")
    g.add_argument("--cut-time", metavar="HH:MM")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--mask-cut", type=int, metavar="J", help="score only intervals after the first J")
    g.add_argument("--mask-time", metavar="HH:MM")
    p.add_argument("--omega", default="auto")
    p.add_argument("--bootstrap", type=int, default=0, metavar="B")
    _staff_flags(p, False)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.ERROR if args.quiet else logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="ratefactor: %(levelname)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except (DataError, ValueError, KeyError, OSError) as exc:
        print(f"ratefactor: input error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"ratefactor: numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
