"""Daily price files to marked point processes, plus intensity-versus-mark diagnostics.

Two return series are put on a shared clock: the sorted union of their dates,
indexed ``1 .. n`` with one time unit per merged trading day. A day is an
event for a series when its absolute log return strictly exceeds the
threshold. When both series fire on the same day, the second one is placed
half a unit later so event times stay strictly increasing.
"""
from __future__ import annotations

import csv
import datetime as dt
import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import DomainError, FormatError, InsufficientDataError
from .model import MarkedPath
from .simulate import replay

DEFAULT_THRESHOLD = 0.025
TIE_OFFSETS = (0.0, 0.5)
N_BINS = 10


class DataWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PriceSeries:
    name: str
    dates: tuple
    closes: np.ndarray
    dropped: int = 0

    def __post_init__(self):
        if len(self.dates) != len(self.closes):
            raise DomainError("dates and closes differ in length")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise DomainError("dates must be strictly increasing")
        if np.any(~(np.asarray(self.closes) > 0)):
            raise DomainError("closes must be > 0")

    def __len__(self):
        return len(self.dates)


@dataclass(frozen=True)
class ReturnSeries:
    name: str
    dates: tuple
    r: np.ndarray

    def __len__(self):
        return len(self.dates)


class SignFilter(enum.Enum):
    ALL = "all"
    POSITIVE = "pos"
    NEGATIVE = "neg"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"all": cls.ALL, "pos": cls.POSITIVE, "positive": cls.POSITIVE,
                   "neg": cls.NEGATIVE, "negative": cls.NEGATIVE}
        try:
            return aliases[str(value).lower()]
        except KeyError as exc:
            raise DomainError(f"unknown sign filter {value!r}; use all, pos or neg") from exc

    def passes(self, r):
        if self is SignFilter.POSITIVE:
            return r > 0
        if self is SignFilter.NEGATIVE:
            return r < 0
        return np.ones_like(r, dtype=bool)


@dataclass(frozen=True)
class ExtractionConfig:
    threshold: float = DEFAULT_THRESHOLD
    sign_filter: SignFilter = SignFilter.ALL
    clock: str = "union"

    def __post_init__(self):
        if not (self.threshold > 0 and math.isfinite(self.threshold)):
            raise DomainError(f"threshold must be > 0, got {self.threshold}")
        object.__setattr__(self, "sign_filter", SignFilter.parse(self.sign_filter))
        if self.clock != "union":
            raise DomainError("only the 'union' clock is available")


def load_price_csv(file, date_col="Date", close_col="Close", name=None):
    """Read a daily price file with ISO dates.

    Rows with a missing, unparseable or non-positive close are dropped and
    counted in ``PriceSeries.dropped``. Dates out of order raise
    :class:`FormatError` naming the row.
    """
    name = name or str(file)
    try:
        fh = open(file, newline="", encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read price file {file}: {exc.strerror}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or date_col not in reader.fieldnames or close_col not in reader.fieldnames:
            raise FormatError(f"{file}: header must contain '{date_col}' and '{close_col}' columns")
        dates, closes = [], []
        dropped = 0
        for line, row in enumerate(reader, start=2):
            raw_date = (row.get(date_col) or "").strip()
            try:
                day = dt.date.fromisoformat(raw_date)
            except ValueError as exc:
                raise FormatError(f"{file}: row {line} has unparseable date {raw_date!r}") from exc
            try:
                close = float(row.get(close_col) or "nan")
            except ValueError:
                close = math.nan
            if not (close > 0 and math.isfinite(close)):
                dropped += 1
                continue
            if dates and day <= dates[-1]:
                raise FormatError(f"{file}: row {line} date {day} is not after {dates[-1]}")
            dates.append(day)
            closes.append(close)
    if dropped:
        warnings.warn(f"{file}: dropped {dropped} rows with missing or non-positive close", DataWarning)
    if len(dates) < 2:
        raise InsufficientDataError(f"{file}: need at least 2 usable rows, got {len(dates)}")
    return PriceSeries(name, tuple(dates), np.asarray(closes, dtype=float), dropped)


def log_returns(series):
    """``r_i = log(close_i / close_{i-1})`` dated at the later day."""
    if len(series) < 2:
        raise InsufficientDataError("need at least 2 prices for a return")
    closes = np.asarray(series.closes, dtype=float)
    return ReturnSeries(series.name, tuple(series.dates[1:]), np.log(closes[1:] / closes[:-1]))


def shared_clock(*series):
    """Sorted union of the series' dates and a date -> index (1-based) map."""
    days = sorted(set().union(*[set(s.dates) for s in series]))
    return days, {day: i + 1 for i, day in enumerate(days)}


def extract_jumps(returns_1, returns_2, config=None):
    """Threshold exceedances of two return series as a bivariate marked path."""
    config = config or ExtractionConfig()
    if len(returns_1) == 0 or len(returns_2) == 0:
        raise InsufficientDataError("both return series must be non-empty")
    days, index = shared_clock(returns_1, returns_2)
    n = len(days)
    fired = []
    for k, series in enumerate((returns_1, returns_2)):
        r = np.asarray(series.r, dtype=float)
        hit = (np.abs(r) > config.threshold) & config.sign_filter.passes(r)
        for i in np.flatnonzero(hit):
            fired.append((index[series.dates[i]], k, float(abs(r[i]))))
    fired.sort(key=lambda e: (e[0], e[1]))
    times, comps, marks = [], [], []
    for j, (day, k, y) in enumerate(fired):
        t = float(day)
        if k == 1 and j > 0 and fired[j - 1][0] == day:
            t += TIE_OFFSETS[1]
        times.append(t)
        comps.append(k)
        marks.append(y)
    T = float(n)
    if times and times[-1] > T:
        T = times[-1]
    meta = {
        "clock": "union",
        "time_unit": "merged trading day",
        "n_days": n,
        "first_date": days[0].isoformat(),
        "last_date": days[-1].isoformat(),
        "threshold": config.threshold,
        "sign": config.sign_filter.value,
        "series": f"{returns_1.name}|{returns_2.name}",
    }
    if not times:
        warnings.warn("no threshold exceedances under the chosen filter; path is empty", DataWarning)
    return MarkedPath(T, times, comps, marks, 2, meta)


@dataclass
class MarkDiagnostics:
    """Per-event intensities and binned mean marks."""

    events: pd.DataFrame
    bins: pd.DataFrame
    metadata: dict = field(default_factory=dict)


def _bin_table(events, d, n_bins):
    rows = []
    for k in range(d):
        sub = events[events["k"] == k + 1].sort_values("lambda", kind="stable")
        if sub.empty:
            continue
        pieces = np.array_split(np.arange(len(sub)), min(n_bins, len(sub)))
        lam = sub["lambda"].to_numpy()
        y = sub["y"].to_numpy()
        for p in pieces:
            rows.append((k + 1, lam[p].min(), lam[p].max(), float(np.mean(np.abs(y[p]))), len(p)))
    return pd.DataFrame(rows, columns=["component", "bin_lo", "bin_hi", "mean_abs_jump", "count"])


def intensity_vs_marks(spec_hat, path, lambda_init=None, n_bins=N_BINS, steps_per_unit=20):
    """Left-limit intensity of the firing component at each event, and its mark.

    Bins are equal-count groups of the sorted intensities of each component.
    """
    rep = replay(spec_hat, path, lambda_init, steps_per_unit)
    n = len(path)
    lam = rep.lambda_minus[np.arange(n), path.components] if n else np.empty(0)
    events = pd.DataFrame({"t": path.times, "k": path.components + 1, "lambda": lam, "y": path.marks})
    return MarkDiagnostics(events, _bin_table(events, path.d, n_bins), dict(path.metadata))
