"""Load ratio, weekly dimensionless trend and local fluctuation.

The day-over-day ratio ``L[t] / L[t-24]`` is split into a smoothed
hour-of-week mean (the trend) and the residual fluctuation; a predicted ratio
times the previous day's load recovers the load.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numcore import ShapeError

SLOTS_PER_WEEK = 168


class CoverageError(ValueError):
    pass


@dataclass
class RatioSeries:
    values: np.ndarray
    start_slot: int = 0  # hour-of-week of values[0], Monday 00:00 = 0

    def __len__(self):
        return len(self.values)

    def slots(self) -> np.ndarray:
        return (self.start_slot + np.arange(len(self.values))) % SLOTS_PER_WEEK


@dataclass
class DimensionlessTrend:
    profile: np.ndarray
    filter_width: int = 5

    def __post_init__(self):
        self.profile = np.asarray(self.profile, dtype=np.float64)
        if self.profile.shape != (SLOTS_PER_WEEK,):
            raise ShapeError(f"trend needs {SLOTS_PER_WEEK} slots, got {self.profile.shape}")

    def along(self, start_slot: int, n: int) -> np.ndarray:
        """Trend values for ``n`` consecutive hours starting at ``start_slot``."""
        return self.profile[(start_slot + np.arange(n)) % SLOTS_PER_WEEK]

    @classmethod
    def zeros(cls) -> "DimensionlessTrend":
        return cls(np.zeros(SLOTS_PER_WEEK), 1)


@dataclass
class FluctuationSeries:
    values: np.ndarray
    start_slot: int = 0

    def __len__(self):
        return len(self.values)


def hour_of_week(timestamp) -> int:
    ts = np.datetime64(timestamp, "h")
    day = ts.astype("datetime64[D]")
    # 1970-01-01 was a Thursday (weekday 3)
    weekday = (int(day.astype(np.int64)) + 3) % 7
    hour = int((ts - day).astype(np.int64))
    return weekday * 24 + hour


def compute_load_ratio(load, start_slot: int = 0) -> RatioSeries:
    """``values[i] = load[i + 24] / load[i]``; ``start_slot`` labels ``values[0]``."""
    load = np.asarray(load, dtype=np.float64)
    if load.ndim != 1 or len(load) < 48:
        raise ValueError("need at least 48 hourly loads")
    if not np.all(load > 0):
        raise ValueError("load ratio undefined for nonpositive loads")
    return RatioSeries(load[24:] / load[:-24], int(start_slot) % SLOTS_PER_WEEK)


def _circular_box(profile: np.ndarray, width: int) -> np.ndarray:
    if width == 1:
        return profile.copy()
    half = width // 2
    padded = np.concatenate([profile[-half:], profile, profile[:half]])
    return np.convolve(padded, np.full(width, 1.0 / width), mode="valid")


def extract_weekly_trend(ratios: RatioSeries | Sequence[RatioSeries], filter_width: int = 5) -> DimensionlessTrend:
    """Hour-of-week mean of the ratios, then a circular centered moving average.

    Several series (e.g. one per training district) are pooled slot by slot.
    """
    if filter_width < 1 or filter_width % 2 == 0:
        raise ValueError("filter_width must be a positive odd integer")
    if filter_width > SLOTS_PER_WEEK:
        raise ValueError("filter_width exceeds the week")
    series = [ratios] if isinstance(ratios, RatioSeries) else list(ratios)
    # Deviations from each slot's first value are summed so that a slot of
    # identical values averages back to that value exactly.
    ref = np.full(SLOTS_PER_WEEK, np.nan)
    for r in series:
        slots = r.slots()
        todo = np.isnan(ref[slots])
        first = np.unique(slots[todo], return_index=True)
        ref[first[0]] = r.values[todo][first[1]]
    if np.any(np.isnan(ref)):
        raise CoverageError(f"{int(np.sum(np.isnan(ref)))} hour-of-week slots have no data")
    sums = np.zeros(SLOTS_PER_WEEK)
    counts = np.zeros(SLOTS_PER_WEEK)
    for r in series:
        slots = r.slots()
        np.add.at(sums, slots, r.values - ref[slots])
        np.add.at(counts, slots, 1)
    return DimensionlessTrend(_circular_box(ref + sums / counts, filter_width), filter_width)


def decompose(ratios: RatioSeries, trend: DimensionlessTrend) -> FluctuationSeries:
    return FluctuationSeries(ratios.values - trend.along(ratios.start_slot, len(ratios)), ratios.start_slot)


def recompose_ratio(fluct: FluctuationSeries, trend: DimensionlessTrend) -> RatioSeries:
    return RatioSeries(fluct.values + trend.along(fluct.start_slot, len(fluct)), fluct.start_slot)


def recompose_load(predicted_ratio, prev_day_load) -> np.ndarray:
    """Next-day load from its ratio and the same hours of the previous day.

    Accepts single days ([24]) or stacks of days ([N, 24]).
    """
    ratio = np.asarray(predicted_ratio, dtype=np.float64)
    prev = np.asarray(prev_day_load, dtype=np.float64)
    if ratio.shape != prev.shape or ratio.shape[-1] != 24:
        raise ShapeError(f"expected matching [..., 24] inputs, got {ratio.shape} and {prev.shape}")
    return ratio * prev


def export_trend(trend: DimensionlessTrend, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{i},{v!r}\n" for i, v in enumerate(trend.profile.tolist())))


def read_trend(path, filter_width: int = 5) -> DimensionlessTrend:
    rows = [line.split(",") for line in Path(path).read_text().splitlines() if line.strip()]
    profile = np.zeros(SLOTS_PER_WEEK)
    if len(rows) != SLOTS_PER_WEEK:
        raise ValueError(f"{path}: expected {SLOTS_PER_WEEK} lines, found {len(rows)}")
    for slot, value in rows:
        profile[int(slot)] = float(value)
    return DimensionlessTrend(profile, filter_width)
