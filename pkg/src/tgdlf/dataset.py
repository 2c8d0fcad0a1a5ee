"""Raw hourly district files, cleaning, and the 9-column feature matrix."""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decomposition import RatioSeries, compute_load_ratio, hour_of_week

RAW_COLUMNS = ("timestamp", "load", "temperature", "humidity", "wind_speed", "precipitation")
WEATHER_COLUMNS = ("temperature", "humidity", "wind_speed", "precipitation")
FEATURE_COLUMNS = ("load_ratio", "temperature", "humidity", "wind_speed", "precipitation",
                   "is_saturday", "is_monday", "is_summer", "is_weekend")
WEATHER_SLICE = slice(1, 5)
FLAG_SLICE = slice(5, 9)
TIME_FORMAT = "%Y-%m-%d %H:00"


class ParseError(ValueError):
    pass


class StructuralError(ValueError):
    pass


class UnrecoverableDataError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass
class RawSeries:
    """Hourly load and weather; NaN marks a missing cell."""

    timestamps: np.ndarray  # datetime64[h]
    load: np.ndarray
    temperature: np.ndarray
    humidity: np.ndarray
    wind_speed: np.ndarray
    precipitation: np.ndarray

    def __len__(self):
        return len(self.timestamps)

    def weather(self) -> np.ndarray:
        return np.column_stack([getattr(self, c) for c in WEATHER_COLUMNS])

    def is_clean(self) -> bool:
        values = np.column_stack([self.load, self.weather()])
        steps = np.diff(self.timestamps).astype(np.int64)
        return bool(np.all(np.isfinite(values)) and np.all(steps == 1))


@dataclass(frozen=True)
class CalendarFlags:
    is_saturday: int
    is_monday: int
    is_weekend: int
    is_summer: int


@dataclass
class DistrictDataset:
    district_id: str
    features: np.ndarray  # [N, 9], N a multiple of 24, first row at 00:00
    load: np.ndarray  # [N] load aligned with the feature rows
    lag_load: np.ndarray  # [24] loads of the day consumed by the ratio lag
    start_date: dt.date

    @property
    def n_days(self) -> int:
        return len(self.features) // 24

    @property
    def start_slot(self) -> int:
        return self.start_date.weekday() * 24

    @property
    def ratio(self) -> np.ndarray:
        return self.features[:, 0]

    def ratio_series(self) -> RatioSeries:
        return RatioSeries(self.features[:, 0].copy(), self.start_slot)

    def slice_days(self, start: int, stop: int) -> "DistrictDataset":
        """Sub-dataset of ratio days ``[start, stop)``."""
        if not 0 <= start < stop <= self.n_days:
            raise ValueError(f"day range [{start}, {stop}) outside 0..{self.n_days}")
        lag = self.lag_load if start == 0 else self.load[(start - 1) * 24:start * 24]
        return DistrictDataset(self.district_id, self.features[start * 24:stop * 24].copy(),
                               self.load[start * 24:stop * 24].copy(), lag.copy(),
                               self.start_date + dt.timedelta(days=start))


# ---------------------------------------------------------------- raw files


def _cell(text: str, lineno: int, column: str) -> float:
    text = text.strip()
    if not text:
        return np.nan
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"line {lineno}: bad value {text!r} in column {column}") from None


def load_raw(path) -> RawSeries:
    """Parse a district CSV; duplicated timestamps keep their first row."""
    path = Path(path)
    seen = set()
    stamps, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != RAW_COLUMNS:
            raise ParseError(f"line 1: expected header {','.join(RAW_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(RAW_COLUMNS):
                raise ParseError(f"line {lineno}: expected {len(RAW_COLUMNS)} fields, got {len(row)}")
            try:
                ts = dt.datetime.strptime(row[0].strip(), TIME_FORMAT)
            except ValueError:
                raise ParseError(f"line {lineno}: bad timestamp {row[0]!r}") from None
            values = [_cell(v, lineno, c) for v, c in zip(row[1:], RAW_COLUMNS[1:])]
            if ts in seen:
                continue
            seen.add(ts)
            stamps.append(ts)
            rows.append(values)
    timestamps = np.array(stamps, dtype="datetime64[h]")
    if len(timestamps) > 1 and np.any(np.diff(timestamps).astype(np.int64) <= 0):
        raise StructuralError(f"{path}: timestamps are not increasing")
    data = np.array(rows, dtype=np.float64).reshape(-1, 5)
    return RawSeries(timestamps, *(data[:, i].copy() for i in range(5)))


def write_raw(path, raw: RawSeries):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = [raw.load, raw.temperature, raw.humidity, raw.wind_speed, raw.precipitation]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RAW_COLUMNS)
        for i, ts in enumerate(raw.timestamps):
            stamp = ts.astype(dt.datetime).strftime(TIME_FORMAT)
            w.writerow([stamp] + ["" if np.isnan(c[i]) else repr(float(c[i])) for c in cols])


# ---------------------------------------------------------------- cleaning


def fill_missing_linear(series) -> np.ndarray:
    """Linear interpolation across NaN gaps; edge gaps copy the nearest value."""
    x = np.asarray(series, dtype=np.float64)
    ok = np.isfinite(x)
    if not ok.any():
        raise UnrecoverableDataError("series has no observed values")
    if ok.all():
        return x.copy()
    idx = np.arange(len(x))
    return np.interp(idx, idx[ok], x[ok])


def outlier_mask(series, window: int = 12, k: float = 6.0) -> np.ndarray:
    x = np.asarray(series, dtype=np.float64)
    if window < 1 or k <= 0:
        raise ValueError("window must be >= 1 and k > 0")
    padded = np.concatenate([np.full(window, np.nan), x, np.full(window, np.nan)])
    hood = np.lib.stride_tricks.sliding_window_view(padded, 2 * window + 1)
    hood = np.delete(hood, window, axis=1)  # drop the centre point
    med = np.nanmedian(hood, axis=1)
    mad = np.nanmedian(np.abs(hood - med[:, None]), axis=1)
    return np.abs(x - med) > k * np.maximum(mad, 1e-9)


def replace_outliers(series, window: int = 12, k: float = 6.0) -> np.ndarray:
    """Points further than ``k`` MADs from their neighbourhood median are
    dropped and re-filled by linear interpolation."""
    x = np.array(series, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("replace_outliers needs a series without missing values")
    mask = outlier_mask(x, window, k)
    if not mask.any():
        return x
    x[mask] = np.nan
    return fill_missing_linear(x)


def regrid_hourly(raw: RawSeries) -> RawSeries:
    """Insert missing rows so timestamps form a gapless hourly grid."""
    if len(raw) == 0:
        raise InsufficientDataError("empty series")
    grid = np.arange(raw.timestamps[0], raw.timestamps[-1] + np.timedelta64(1, "h"), dtype="datetime64[h]")
    pos = (raw.timestamps - grid[0]).astype(np.int64)
    cols = {}
    for name in ("load",) + WEATHER_COLUMNS:
        col = np.full(len(grid), np.nan)
        col[pos] = getattr(raw, name)
        cols[name] = col
    return RawSeries(grid, **cols)


def clean(raw: RawSeries, window: int = 12, k: float = 6.0) -> RawSeries:
    """Regrid, zero missing precipitation, interpolate the rest, and repair load outliers."""
    raw = regrid_hourly(raw)
    precip = np.where(np.isfinite(raw.precipitation), raw.precipitation, 0.0)
    load = replace_outliers(fill_missing_linear(raw.load), window, k)
    return RawSeries(raw.timestamps, load, fill_missing_linear(raw.temperature),
                     fill_missing_linear(raw.humidity), fill_missing_linear(raw.wind_speed), precip)


# ---------------------------------------------------------------- features


def compute_calendar_flags(date: dt.date) -> CalendarFlags:
    wd = date.weekday()
    return CalendarFlags(is_saturday=int(wd == 5), is_monday=int(wd == 0),
                         is_weekend=int(wd >= 5), is_summer=int(date.month in (6, 7, 8)))


def build_district_dataset(raw: RawSeries, district_id: str) -> DistrictDataset:
    """Trim to whole days, drop the first day into the ratio lag, attach flags."""
    if not raw.is_clean():
        raise ValueError("raw series must be cleaned first (gapless grid, no missing values)")
    hours = (raw.timestamps - raw.timestamps.astype("datetime64[D]")).astype(np.int64)
    first = int(np.argmax(hours == 0)) if np.any(hours == 0) else len(raw)
    n_days = (len(raw) - first) // 24
    if n_days < 2:
        raise InsufficientDataError("need at least 48 hours starting at midnight")
    sl = slice(first, first + n_days * 24)
    load = raw.load[sl]
    start = raw.timestamps[first + 24].astype(dt.datetime).date()
    ratio = compute_load_ratio(load, hour_of_week(raw.timestamps[first + 24]))
    weather = raw.weather()[sl][24:]
    flags = []
    for d in range(n_days - 1):
        f = compute_calendar_flags(start + dt.timedelta(days=d))
        flags.append([f.is_saturday, f.is_monday, f.is_summer, f.is_weekend])
    flags = np.repeat(np.array(flags, dtype=np.float64), 24, axis=0)
    features = np.column_stack([ratio.values, weather, flags])
    return DistrictDataset(district_id, features, load[24:].copy(), load[:24].copy(), start)


def preprocess_file(path, window: int = 12, k: float = 6.0) -> DistrictDataset:
    path = Path(path)
    return build_district_dataset(clean(load_raw(path), window, k), path.stem)


def load_districts(directory, window: int = 12, k: float = 6.0) -> list[DistrictDataset]:
    files = sorted(Path(directory).glob("*.csv"))
    if not files:
        raise FileNotFoundError(f"no district files in {directory}")
    return [preprocess_file(f, window, k) for f in files]


def write_dataset(path, ds: DistrictDataset):
    """Feature matrix plus aligned load, one row per hour."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("timestamp", "load") + FEATURE_COLUMNS)
        t0 = dt.datetime.combine(ds.start_date, dt.time())
        for i, row in enumerate(ds.features):
            stamp = (t0 + dt.timedelta(hours=i)).strftime(TIME_FORMAT)
            w.writerow([stamp, repr(float(ds.load[i]))] + [repr(float(v)) for v in row])
