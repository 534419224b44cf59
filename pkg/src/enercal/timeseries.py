"""Irregularly sampled price data: loading, validation, step decomposition.

Time is measured in ACT/365 year fractions throughout (the only daycount
convention offered). Consecutive observations (X_{k-1}, X_k) are turned
into steps, and each step is bucketed by the calendar (month, year) of its
*earlier* timestamp; a step straddling a month boundary belongs to the
earlier month. Every estimator downstream consumes these bucketed steps.

Missing values in a CSV are skipped (lengthening the step) rather than
interpolated: interpolation would manufacture autocorrelation that biases
the mean-reversion estimate. Duplicate timestamps are an error, never
averaged.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np

DAYS_PER_YEAR = 365.0

GRANULARITIES = ("monthly", "seasonal", "flat")

# season index: 0=winter (Dec-Feb), 1=spring, 2=summer, 3=fall
_SEASON_OF_MONTH = {12: 0, 1: 0, 2: 0, 3: 1, 4: 1, 5: 1,
                    6: 2, 7: 2, 8: 2, 9: 3, 10: 3, 11: 3}
SEASON_NAMES = ("winter", "spring", "summer", "fall")


class DataError(ValueError):
    """Malformed, inconsistent, or insufficient input data."""


def year_fraction(t1: datetime, t2: datetime) -> float:
    """ACT/365 year fraction between two timestamps. Requires t2 > t1."""
    if t2 <= t1:
        raise DataError(f"year_fraction requires t2 > t1, got {t1} .. {t2}")
    return (t2 - t1).total_seconds() / (86400.0 * DAYS_PER_YEAR)


@dataclass(frozen=True)
class PriceSeries:
    """Timestamped observations with strictly increasing timestamps, length >= 2."""

    timestamps: tuple[datetime, ...]
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "timestamps", tuple(self.timestamps))
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or len(self.timestamps) != values.size:
            raise DataError("timestamps and values must be 1-d and equally long")
        if values.size < 2:
            raise DataError(f"series {self.label!r}: need at least 2 observations")
        if not np.all(np.isfinite(values)):
            raise DataError(f"series {self.label!r}: non-finite value present")
        for prev, cur in zip(self.timestamps, self.timestamps[1:]):
            if cur <= prev:
                raise DataError(
                    f"series {self.label!r}: timestamps not strictly increasing at {cur}"
                )

    def __len__(self) -> int:
        return len(self.timestamps)

    def span_days(self) -> float:
        return (self.timestamps[-1] - self.timestamps[0]).total_seconds() / 86400.0


@dataclass(frozen=True)
class FactorSeries:
    """Standardized model innovations; i.i.d. standard normal under a correct model."""

    timestamps: tuple[datetime, ...]
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "timestamps", tuple(self.timestamps))
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or len(self.timestamps) != values.size:
            raise DataError("timestamps and values must be 1-d and equally long")
        if values.size < 1:
            raise DataError(f"factor series {self.label!r}: empty")
        if not np.all(np.isfinite(values)):
            raise DataError(f"factor series {self.label!r}: non-finite value present")
        for prev, cur in zip(self.timestamps, self.timestamps[1:]):
            if cur <= prev:
                raise DataError(
                    f"factor series {self.label!r}: timestamps not strictly increasing at {cur}"
                )

    def __len__(self) -> int:
        return len(self.timestamps)


@dataclass(frozen=True)
class StepSeries:
    """Consecutive observation pairs with ACT/365 gaps and calendar buckets.

    ``month``/``year`` are taken from the earlier timestamp of each pair.
    ``my_keys`` lists the distinct (month, year) buckets in chronological
    order and ``my_index`` maps each pair into that list.
    """

    x_prev: np.ndarray
    x_next: np.ndarray
    dt: np.ndarray
    t_prev: tuple[datetime, ...]
    month: np.ndarray
    year: np.ndarray
    transform: str
    my_keys: tuple[tuple[int, int], ...] = dataclasses.field(init=False)
    my_index: np.ndarray = dataclasses.field(init=False)

    def __post_init__(self):
        for name in ("x_prev", "x_next", "dt"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "month", np.asarray(self.month, dtype=np.int64))
        object.__setattr__(self, "year", np.asarray(self.year, dtype=np.int64))
        object.__setattr__(self, "t_prev", tuple(self.t_prev))
        n = self.x_prev.size
        if not (self.x_next.size == self.dt.size == self.month.size == self.year.size
                == len(self.t_prev) == n):
            raise DataError("step arrays must be equally long")
        if n < 1:
            raise DataError("empty step series")
        if np.any(self.dt <= 0):
            raise DataError("every step must have dt > 0")
        if self.transform not in ("log", "identity"):
            raise DataError(f"unknown transform {self.transform!r}")
        # chronological bucket order: (year, month)
        seen: dict[tuple[int, int], int] = {}
        for m, y in sorted({(int(m), int(y)) for m, y in zip(self.month, self.year)},
                           key=lambda my: (my[1], my[0])):
            seen[(m, y)] = len(seen)
        idx = np.array([seen[(int(m), int(y))] for m, y in zip(self.month, self.year)],
                       dtype=np.int64)
        object.__setattr__(self, "my_keys", tuple(seen))
        object.__setattr__(self, "my_index", idx)

    def __len__(self) -> int:
        return self.x_prev.size

    def vol_buckets(self, granularity: str = "monthly") -> tuple[np.ndarray, tuple]:
        """Bucket index per pair plus the bucket keys, for a volatility granularity.

        Keys are months 1..12 (monthly), season names (seasonal), or the
        single key "all" (flat); only buckets with data appear.
        """
        if granularity not in GRANULARITIES:
            raise DataError(f"unknown granularity {granularity!r}")
        if granularity == "monthly":
            raw = self.month
            all_keys = list(range(1, 13))
        elif granularity == "seasonal":
            raw = np.array([_SEASON_OF_MONTH[int(m)] for m in self.month], dtype=np.int64)
            all_keys = list(range(4))
        else:
            raw = np.zeros(len(self), dtype=np.int64)
            all_keys = [0]
        present = sorted(set(int(v) for v in raw))
        remap = {v: i for i, v in enumerate(present)}
        idx = np.array([remap[int(v)] for v in raw], dtype=np.int64)
        if granularity == "monthly":
            keys = tuple(present)
        elif granularity == "seasonal":
            keys = tuple(SEASON_NAMES[v] for v in present)
        else:
            keys = ("all",)
        del all_keys
        return idx, keys

    def take(self, mask: np.ndarray) -> "StepSeries":
        """Sub-series of the pairs selected by a boolean mask."""
        mask = np.asarray(mask, dtype=bool)
        if mask.size != len(self):
            raise DataError("mask length mismatch")
        if not mask.any():
            raise DataError("mask removes every step")
        t_prev = tuple(t for t, keep in zip(self.t_prev, mask) if keep)
        return StepSeries(self.x_prev[mask], self.x_next[mask], self.dt[mask],
                          t_prev, self.month[mask], self.year[mask], self.transform)


def month_bucket_key(month: int, granularity: str):
    """Bucket key of a calendar month under a granularity."""
    if granularity == "monthly":
        return int(month)
    if granularity == "seasonal":
        return SEASON_NAMES[_SEASON_OF_MONTH[int(month)]]
    if granularity == "flat":
        return "all"
    raise DataError(f"unknown granularity {granularity!r}")


def coarser_granularity(granularity: str) -> str | None:
    """Next coarser granularity, or None if already flat."""
    order = {"monthly": "seasonal", "seasonal": "flat", "flat": None}
    if granularity not in order:
        raise DataError(f"unknown granularity {granularity!r}")
    return order[granularity]


def load_csv(path, value_column: str, label: str | None = None) -> PriceSeries:
    """Load one value column of a CSV file into a PriceSeries.

    The file must have a header row with a ``date`` column (YYYY-MM-DD or
    YYYY-MM-DDTHH:MM) and the named value column. Rows whose value cell is
    empty are skipped as missing data. Rows are sorted by timestamp.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    rows: list[tuple[datetime, float]] = []
    with path.open("r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "date" not in reader.fieldnames:
            raise DataError(f"{path}: missing 'date' column in header")
        if value_column not in reader.fieldnames:
            raise DataError(f"{path}: missing value column {value_column!r}")
        for lineno, row in enumerate(reader, start=2):
            raw_value = (row.get(value_column) or "").strip()
            if raw_value == "":
                continue  # missing observation
            raw_date = (row.get("date") or "").strip()
            try:
                ts = datetime.fromisoformat(raw_date)
            except ValueError:
                raise DataError(f"{path}: row {lineno}: unparseable date {raw_date!r}") from None
            try:
                value = float(raw_value)
            except ValueError:
                raise DataError(f"{path}: row {lineno}: unparseable value {raw_value!r}") from None
            if not math.isfinite(value):
                raise DataError(f"{path}: row {lineno}: non-finite value {raw_value!r}")
            rows.append((ts, value))
    if len(rows) < 2:
        raise DataError(f"{path}: fewer than 2 valid rows")
    rows.sort(key=lambda tv: tv[0])
    for (t1, _), (t2, _) in zip(rows, rows[1:]):
        if t1 == t2:
            raise DataError(f"{path}: duplicate timestamp {t1}")
    return PriceSeries(tuple(t for t, _ in rows),
                       np.array([v for _, v in rows], dtype=float),
                       label if label is not None else value_column)


def to_steps(series: PriceSeries, transform: str = "log") -> StepSeries:
    """Decompose a series into steps (X_{k-1}, X_k, dt) with calendar buckets.

    transform='log' maps prices through log (lognormal model) and requires
    strictly positive values; 'identity' leaves them as is (normal model).
    """
    if transform == "log":
        bad = np.nonzero(series.values <= 0)[0]
        if bad.size:
            ts = series.timestamps[int(bad[0])]
            raise DataError(
                f"series {series.label!r}: nonpositive value at {ts} under log transform"
            )
        x = np.log(series.values)
    elif transform == "identity":
        x = np.asarray(series.values, dtype=float)
    else:
        raise DataError(f"unknown transform {transform!r}")
    ts = series.timestamps
    dt = np.array([year_fraction(a, b) for a, b in zip(ts, ts[1:])])
    month = np.array([t.month for t in ts[:-1]], dtype=np.int64)
    year = np.array([t.year for t in ts[:-1]], dtype=np.int64)
    return StepSeries(x[:-1], x[1:], dt, ts[:-1], month, year, transform)


def daycount(series: PriceSeries) -> float:
    """Observation density C = 365 * (number of points) / (series span in days)."""
    span = series.span_days()
    if span <= 0:
        raise DataError(f"series {series.label!r}: zero time span")
    return DAYS_PER_YEAR * len(series) / span


def align(a, b):
    """Restrict two timestamped series to their common timestamps.

    Works on PriceSeries and FactorSeries alike; order is preserved and an
    empty intersection is an error.
    """
    common = set(a.timestamps) & set(b.timestamps)
    if not common:
        raise DataError(f"series {a.label!r} and {b.label!r} share no timestamps")
    mask_a = [t in common for t in a.timestamps]
    mask_b = [t in common for t in b.timestamps]
    ts_a = tuple(t for t, keep in zip(a.timestamps, mask_a) if keep)
    ts_b = tuple(t for t, keep in zip(b.timestamps, mask_b) if keep)
    new_a = dataclasses.replace(a, timestamps=ts_a, values=a.values[np.array(mask_a)])
    new_b = dataclasses.replace(b, timestamps=ts_b, values=b.values[np.array(mask_b)])
    return new_a, new_b
