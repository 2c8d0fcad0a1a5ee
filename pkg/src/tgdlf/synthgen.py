"""Synthetic multi-district hourly load and weather.

Each group of districts shares a weekly load profile and correlated weather;
``correlation`` controls both how strongly a district's weather follows its
group and how far its profile and weather sensitivities drift from the
group's. Load is multiplicative:

    load = base * profile(hour_of_week) * (1 + sum_c coef_c * z_c + noise)

where ``z_c`` is standardized weather, so the day-over-day ratio cancels the
base level and the weekly profile becomes an hour-of-week ratio pattern.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from .dataset import RawSeries


@dataclass
class SynthSpec:
    n_districts: int = 4
    days: int = 120
    groups: list[int] | None = None  # group id per district; default two halves
    base_load: float = 1000.0
    profile_amplitude: float = 0.3
    weather_coefs: tuple[float, float, float, float] = (0.15, 0.04, -0.03, 0.02)
    noise_scale: float = 0.005
    correlation: float = 0.9
    seed: int = 0
    start: str = "2008-01-01"
    weather_persistence: float = 0.97  # hourly AR(1) coefficient of weather anomalies
    group_names: list[str] = field(default_factory=lambda: ["east", "west", "central", "north"])

    def __post_init__(self):
        if self.days < 14:
            raise ValueError("days must be >= 14")
        if self.n_districts < 1:
            raise ValueError("n_districts must be positive")
        if not 0.0 <= self.correlation <= 1.0:
            raise ValueError("correlation must lie in [0, 1]")
        if min(self.base_load, self.profile_amplitude, self.noise_scale) < 0:
            raise ValueError("scales must be nonnegative")
        if self.groups is None:
            half = (self.n_districts + 1) // 2
            self.groups = [0 if i < half else 1 for i in range(self.n_districts)]
        if len(self.groups) != self.n_districts:
            raise ValueError("groups must list one id per district")
        self.weather_coefs = tuple(float(c) for c in self.weather_coefs)

    def district_ids(self) -> list[str]:
        ids, counts = [], {}
        for g in self.groups:
            counts[g] = counts.get(g, 0) + 1
            name = self.group_names[g] if g < len(self.group_names) else f"g{g}"
            ids.append(f"{name}{counts[g]}")
        return ids


# weekday level factors, Monday first
_WEEKDAY_LEVELS = np.array([0.97, 1.0, 1.02, 0.99, 1.01, 0.82, 0.76])


def _group_profile(rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Daily shape harmonics, per-weekday levels, per-weekday shape scales.

    The daily cycle is one dominant harmonic plus a weaker second one, which
    keeps peaks broad enough that the neighbourhood outlier rule leaves
    clean data alone.
    """
    phase = rng.uniform(0.0, 2 * np.pi, size=2)
    amp = np.array([1.0, rng.uniform(0.0, 0.3)])
    harmonics = np.column_stack([amp * np.cos(phase), amp * np.sin(phase)])
    levels = _WEEKDAY_LEVELS * (1.0 + rng.normal(0.0, 0.03, size=7))
    scales = 1.0 + rng.normal(0.0, 0.15, size=7)
    return harmonics, levels, scales


def _weekly_profile(harmonics, levels, scales, amplitude) -> np.ndarray:
    hour = np.arange(24)
    shape = np.zeros(24)
    for k, (a, b) in enumerate(harmonics, start=1):
        w = 2 * np.pi * k * hour / 24
        shape += a * np.sin(w) + b * np.cos(w)
    shape /= np.abs(shape).max()
    # per-day factors are blended across midnight so the week has no kinks
    level = _smooth_week(np.repeat(levels, 24))
    scale = _smooth_week(np.repeat(scales, 24))
    return level * (1.0 + amplitude * scale * np.tile(shape, 7))


def _smooth_week(steps: np.ndarray, width: int = 13) -> np.ndarray:
    half = width // 2
    padded = np.concatenate([steps[-half:], steps, steps[:half]])
    return np.convolve(padded, np.full(width, 1.0 / width), mode="valid")


def _ar1(innov: np.ndarray, phi: float) -> np.ndarray:
    out = np.empty_like(innov)
    out[0] = innov[0]
    c = np.sqrt(1.0 - phi * phi)
    for t in range(1, len(innov)):
        out[t] = phi * out[t - 1] + c * innov[t]
    return out


def generate(spec: SynthSpec) -> list[RawSeries]:
    """One pristine (no gaps, no spikes) series per district, in the order of ``spec.groups``."""
    rng = np.random.default_rng(spec.seed)
    n_hours = spec.days * 24
    start = np.datetime64(spec.start, "h")
    stamps = start + np.arange(n_hours).astype("timedelta64[h]")
    start_date = dt.date.fromisoformat(spec.start)
    slot0 = start_date.weekday() * 24
    slots = (slot0 + np.arange(n_hours)) % 168
    hour = np.arange(n_hours) % 24
    doy = (start_date.timetuple().tm_yday - 1 + np.arange(n_hours) / 24.0)

    rho = spec.correlation
    drift = 1.0 - rho
    group_ids = sorted(set(spec.groups))
    group_profile = {g: _group_profile(rng) for g in group_ids}
    group_innov = {g: rng.normal(size=(n_hours, 5)) for g in group_ids}

    out = []
    for g in spec.groups:
        harmonics, levels, scales = group_profile[g]
        harmonics = harmonics + drift * rng.normal(0.0, 0.3, size=harmonics.shape)
        levels = levels * (1.0 + drift * rng.normal(0.0, 0.06, size=7))
        scales = scales * (1.0 + drift * rng.normal(0.0, 0.3, size=7))
        profile = _weekly_profile(harmonics, levels, scales, spec.profile_amplitude)
        coefs = np.array(spec.weather_coefs) * (1.0 + drift * rng.normal(0.0, 0.5, size=4))
        base = spec.base_load * rng.uniform(0.5, 2.0)

        own = rng.normal(size=(n_hours, 5))
        innov = rho * group_innov[g] + np.sqrt(max(0.0, 1.0 - rho * rho)) * own
        anomaly = np.column_stack([_ar1(innov[:, c], spec.weather_persistence) for c in range(4)])
        daily = np.sin(2 * np.pi * (hour - 9) / 24)
        season = np.sin(2 * np.pi * (doy - 105) / 365.25)
        temperature = 12.0 + 13.0 * season + 4.0 * daily + 3.0 * anomaly[:, 0]
        humidity = np.clip(60.0 - 10.0 * daily + 12.0 * anomaly[:, 1], 5.0, 100.0)
        wind = np.maximum(0.1, 3.0 + 1.5 * anomaly[:, 2])
        precip = np.maximum(0.0, 1.5 * anomaly[:, 3] - 1.5)
        weather = np.column_stack([temperature, humidity, wind, precip])
        z = (weather - weather.mean(axis=0)) / np.maximum(weather.std(axis=0), 1e-12)

        noise = spec.noise_scale * innov[:, 4]
        load = base * profile[slots] * (1.0 + z @ coefs + noise)
        load = np.maximum(load, 0.01 * base)
        out.append(RawSeries(stamps.copy(), load, temperature, humidity, wind, precip))
    return out


@dataclass
class Corruption:
    gap_positions: np.ndarray  # hours set missing
    spike_positions: np.ndarray  # hours multiplied by a spike factor


def inject_gaps_and_spikes(raw: RawSeries, n_gaps: int = 10, n_spikes: int = 10, seed: int = 0,
                           spacing: int = 26) -> tuple[RawSeries, Corruption]:
    """Blank out short runs of whole rows and multiply isolated load points by 5-10.

    Spikes sit at least ``spacing`` hours from each other and from gaps.
    """
    rng = np.random.default_rng(seed)
    n = len(raw)
    cols = {name: getattr(raw, name).copy() for name in
            ("load", "temperature", "humidity", "wind_speed", "precipitation")}
    if n_gaps == 0 and n_spikes == 0:
        return RawSeries(raw.timestamps.copy(), **cols), Corruption(np.array([], int), np.array([], int))

    cells = np.arange(spacing, n - spacing, spacing)
    if n_gaps + n_spikes > len(cells):
        raise ValueError("series too short for the requested corruption")
    chosen = rng.choice(cells, size=n_gaps + n_spikes, replace=False)
    spikes = np.sort(chosen[:n_spikes])
    gaps = []
    for anchor in chosen[n_spikes:]:
        length = int(rng.integers(1, 4))
        gaps.extend(range(anchor, anchor + length))
    gaps = np.array(sorted(gaps), dtype=int)

    cols["load"][spikes] *= rng.uniform(5.0, 10.0, size=len(spikes))
    for c in cols.values():
        c[gaps] = np.nan
    return RawSeries(raw.timestamps.copy(), **cols), Corruption(gaps, spikes)
