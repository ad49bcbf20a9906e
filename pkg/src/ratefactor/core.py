"""Shared data types, link functions and Poisson likelihood helpers."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

RATE_FLOOR = _kernels.RATE_FLOOR
WEEKDAYS = (1, 2, 3, 4, 5)


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class NumericError(ArithmeticError):
    """A numerical routine hit an invalid domain or failed."""


@dataclass(frozen=True)
class Link:
    """One of the three supported Poisson links.

    ``forward`` maps rates to the linear-predictor scale, ``inverse`` maps back
    and floors the result at ``RATE_FLOOR``.
    """

    kind: str

    _CODES = {"identity": _kernels.IDENTITY, "log": _kernels.LOG, "sqrt": _kernels.SQRT}
    _ALIASES = {"logarithmic": "log", "square-root": "sqrt", "squareroot": "sqrt", "id": "identity"}

    def __post_init__(self):
        kind = self._ALIASES.get(self.kind, self.kind)
        if kind not in self._CODES:
            raise ValueError(f"unknown link {self.kind!r}; expected identity, log or sqrt")
        object.__setattr__(self, "kind", kind)

    @property
    def code(self) -> int:
        return self._CODES[self.kind]

    def forward(self, lam):
        lam = np.asarray(lam, dtype=float)
        if self.kind == "identity":
            return lam.copy()
        if self.kind == "log":
            return np.log(lam)
        return np.sqrt(lam)

    def inverse(self, eta, floor: bool = True):
        eta = np.asarray(eta, dtype=float)
        if self.kind == "identity":
            lam = eta.copy()
        elif self.kind == "log":
            lam = np.exp(eta)
        else:
            lam = np.square(eta)
        return np.maximum(lam, RATE_FLOOR) if floor else lam

    def shifted_forward(self, counts):
        """Link applied to counts with zeros moved off the boundary (SVD start)."""
        y = np.asarray(counts, dtype=float)
        if self.kind == "sqrt":
            return np.sqrt(y + 0.25)
        if self.kind == "log":
            return np.log(y + 0.5)
        return y + RATE_FLOOR

    def __str__(self):
        return self.kind


SQRT = Link("sqrt")
LOG = Link("log")
IDENTITY = Link("identity")


def as_link(link) -> Link:
    return link if isinstance(link, Link) else Link(str(link))


@dataclass(frozen=True)
class CountMatrix:
    """Arrival counts, one row per day (time ordered) and one column per interval."""

    values: np.ndarray
    day_labels: np.ndarray
    interval_labels: tuple = ()
    dates: tuple = ()

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 2:
            raise DataError("counts must be a 2-d grid")
        n, m = vals.shape
        if n < 2 or m < 1:
            raise DataError(f"need at least 2 rows and 1 column, got {n}x{m}")
        if not np.all(np.isfinite(vals)) or np.any(vals < 0) or np.any(vals != np.round(vals)):
            raise DataError("counts must be nonnegative integers")
        days = np.asarray(self.day_labels, dtype=np.int64).reshape(-1)
        if days.shape[0] != n:
            raise DataError(f"{days.shape[0]} day labels for {n} rows")
        if np.any((days < 1) | (days > 5)):
            raise DataError("day-of-week codes must lie in 1..5")
        labels = tuple(str(s) for s in self.interval_labels) or tuple(str(j + 1) for j in range(m))
        if len(labels) != m:
            raise DataError(f"{len(labels)} interval labels for {m} columns")
        dates = tuple(str(s) for s in self.dates)
        if dates and len(dates) != n:
            raise DataError(f"{len(dates)} dates for {n} rows")
        vals = vals.astype(np.int64)
        vals.setflags(write=False)
        days.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "day_labels", days)
        object.__setattr__(self, "interval_labels", labels)
        object.__setattr__(self, "dates", dates)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def rows(self, start: int, stop: int) -> "CountMatrix":
        """Contiguous block of days ``start:stop``."""
        return CountMatrix(
            self.values[start:stop],
            self.day_labels[start:stop],
            self.interval_labels,
            self.dates[start:stop] if self.dates else (),
        )

    def cut_index(self, clock: str) -> int:
        """Number of intervals whose label sorts strictly before ``clock``.

        With quarter-hour labels starting at 07:00, ``"10:00"`` gives 12.
        """
        key = _clock_key(clock)
        try:
            keys = [_clock_key(s) for s in self.interval_labels]
        except ValueError as exc:
            raise DataError("interval labels are not HH:MM clock times") from exc
        return sum(1 for k in keys if k < key)


def _clock_key(text: str):
    hh, mm = str(text).strip().split(":")[:2]
    return int(hh), int(mm)


def quarter_hour_labels(m: int, start: str = "07:00") -> tuple:
    h, mi = _clock_key(start)
    base = h * 60 + mi
    return tuple(f"{(base + 15 * j) // 60:02d}:{(base + 15 * j) % 60:02d}" for j in range(m))


@dataclass(frozen=True)
class FactorModel:
    """Fitted K-factor model ``g(Lambda) = scores @ loadings.T``."""

    link: Link
    scores: np.ndarray
    loadings: np.ndarray
    normalization: str = "scores-orthonormal"
    deviance: float = float("nan")
    iterations_used: int = 0
    converged: bool = True
    warnings: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "link", as_link(self.link))
        B = np.atleast_2d(np.asarray(self.scores, dtype=float))
        F = np.atleast_2d(np.asarray(self.loadings, dtype=float))
        if B.shape[1] != F.shape[1]:
            raise DataError("scores and loadings disagree on K")
        if self.normalization not in ("scores-orthonormal", "loadings-orthonormal"):
            raise DataError(f"unknown normalization {self.normalization!r}")
        B.setflags(write=False)
        F.setflags(write=False)
        object.__setattr__(self, "scores", B)
        object.__setattr__(self, "loadings", F)

    @property
    def K(self) -> int:
        return self.loadings.shape[1]

    def fitted_rates(self) -> np.ndarray:
        return self.link.inverse(self.scores @ self.loadings.T)

    def to_json(self) -> str:
        doc = {
            "link": self.link.kind,
            "K": self.K,
            "normalization": self.normalization,
            "n": int(self.scores.shape[0]),
            "m": int(self.loadings.shape[0]),
            "scores": _floats(self.scores.ravel()),
            "loadings": _floats(self.loadings.ravel()),
            "deviance": _float(self.deviance),
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FactorModel":
        try:
            doc = json.loads(text)
            K = int(doc["K"])
            B = np.asarray(doc["scores"], dtype=float).reshape(-1, K)
            F = np.asarray(doc["loadings"], dtype=float).reshape(-1, K)
            return cls(Link(doc["link"]), B, F, doc["normalization"], float(doc["deviance"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"malformed factor model document: {exc}") from exc


def _float(x):
    # 17 significant digits round-trip every double exactly
    return float(f"{float(x):.17g}")


def _floats(xs):
    return [_float(x) for x in xs]


def poisson_loglik(counts, rates) -> float:
    """Poisson log-likelihood without the log(y!) term."""
    y = np.asarray(counts, dtype=float)
    lam = np.asarray(rates, dtype=float)
    if y.shape != lam.shape:
        raise DataError(f"shape mismatch: counts {y.shape} vs rates {lam.shape}")
    if np.any(~(lam > 0)):
        raise NumericError("rates must be strictly positive")
    return float(np.sum(y * np.log(lam) - lam))


def poisson_deviance(counts, fitted_rates) -> float:
    y = np.asarray(counts, dtype=float)
    lam = np.asarray(fitted_rates, dtype=float)
    if y.shape != lam.shape:
        raise DataError(f"shape mismatch: counts {y.shape} vs rates {lam.shape}")
    if np.any(~(lam > 0)):
        raise NumericError("fitted rates must be strictly positive")
    return float(max(np.sum(_kernels.row_deviance_np(y.reshape(1, -1), lam.reshape(1, -1))), 0.0))


def apply_factor_model(model: FactorModel, scores_row) -> np.ndarray:
    """Rate profile ``g^-1(F @ beta)`` for one score vector."""
    beta = np.asarray(scores_row, dtype=float).reshape(-1)
    if beta.shape[0] != model.K:
        raise DataError(f"expected {model.K} scores, got {beta.shape[0]}")
    if not np.all(np.isfinite(beta)):
        raise NumericError("scores must be finite")
    return model.link.inverse(model.loadings @ beta)


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def read_counts_csv(path_or_text, text: bool = False) -> CountMatrix:
    """Parse ``date,dow,<labels...>`` rows into a CountMatrix.

    Errors carry the 1-based line number of the offending row.
    """
    if text:
        handle = io.StringIO(path_or_text)
    else:
        handle = open(path_or_text, newline="")
    with handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("line 1: empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 3 or header[0].lower() != "date" or header[1].lower() != "dow":
            raise DataError("line 1: header must start with date,dow")
        labels = header[2:]
        dates, days, rows = [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                dow = int(rec[1])
            except ValueError:
                raise DataError(f"line {lineno}, column 2: bad day-of-week {rec[1]!r}") from None
            if not 1 <= dow <= 5:
                raise DataError(f"line {lineno}, column 2: day-of-week {dow} outside 1..5")
            vals = []
            for col, cell in enumerate(rec[2:], start=3):
                try:
                    v = int(cell)
                except ValueError:
                    raise DataError(f"line {lineno}, column {col}: bad count {cell!r}") from None
                if v < 0:
                    raise DataError(f"line {lineno}, column {col}: negative count")
                vals.append(v)
            dates.append(rec[0].strip())
            days.append(dow)
            rows.append(vals)
    if len(rows) < 2:
        raise DataError("need at least two data rows")
    return CountMatrix(np.array(rows, dtype=np.int64), np.array(days), tuple(labels), tuple(dates))


def counts_to_csv(cm: CountMatrix) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["date", "dow", *cm.interval_labels])
    dates = cm.dates or tuple(f"day{i + 1}" for i in range(cm.n))
    for d, dow, row in zip(dates, cm.day_labels, cm.values):
        w.writerow([d, int(dow), *(int(v) for v in row)])
    return out.getvalue()


def grid_to_csv(cm: CountMatrix, grid) -> str:
    """Real-valued grid (e.g. hidden rates) in the counts layout."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["date", "dow", *cm.interval_labels])
    dates = cm.dates or tuple(f"day{i + 1}" for i in range(cm.n))
    for d, dow, row in zip(dates, cm.day_labels, np.asarray(grid)):
        w.writerow([d, int(dow), *(format(float(v), ".17g") for v in row)])
    return out.getvalue()


def read_grid_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                rows.append([float(c) for c in rec[2:]])
            except ValueError:
                raise DataError(f"line {lineno}: non-numeric rate") from None
    return np.array(rows)


def next_weekday(day: int, steps: int = 1) -> int:
    return (int(day) - 1 + steps) % 5 + 1


def weekday_sequence(start_day: int, n: int) -> np.ndarray:
    return np.array([next_weekday(start_day, i) for i in range(n)], dtype=np.int64)


def check_positive_finite(x, what: str = "rates"):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise NumericError(f"{what} must be finite and > 0")
    return arr


__all__ = [
    "CountMatrix",
    "DataError",
    "FactorModel",
    "IDENTITY",
    "LOG",
    "Link",
    "NumericError",
    "RATE_FLOOR",
    "SQRT",
    "apply_factor_model",
    "as_link",
    "counts_to_csv",
    "poisson_deviance",
    "poisson_loglik",
    "quarter_hour_labels",
    "read_counts_csv",
]
