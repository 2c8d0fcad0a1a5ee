"""Multiplicative Gaussian weather-forecast noise and the test-time noise sweep."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .model import TransformerModel
    from .train import Windows

WEATHER_COLUMNS = slice(1, 5)
SWEEP_PROPORTIONS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6)


@dataclass(frozen=True)
class NoiseSpec:
    proportion: float
    seed: int = 0

    def __post_init__(self):
        if self.proportion < 0:
            raise ValueError("noise proportion must be nonnegative")


def perturb_weather(weather, spec: NoiseSpec, draws: np.ndarray | None = None) -> np.ndarray:
    """``w * (1 + n * proportion)`` with one standard-normal ``n`` per cell.

    ``draws`` overrides the seeded draws (same shape as ``weather``).
    """
    w = np.asarray(weather, dtype=np.float64)
    if spec.proportion == 0:
        return w.copy()
    if draws is None:
        draws = np.random.default_rng(spec.seed).standard_normal(w.shape)
    return w * (1.0 + np.asarray(draws) * spec.proportion)


def perturb_inputs(inputs: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Perturb only the four weather columns of a feature array [..., 9]."""
    out = np.array(inputs, dtype=np.float64, copy=True)
    out[..., WEATHER_COLUMNS] = perturb_weather(out[..., WEATHER_COLUMNS], spec)
    return out


@dataclass
class SweepRow:
    proportion: float
    mean_mse: float
    std_mse: float


def noise_sweep(model: "TransformerModel | None", samples: "Windows", proportions: Sequence[float] = SWEEP_PROPORTIONS,
                seeds: Sequence[int] = (0, 1, 2, 3, 4), mode: str = "full",
                metric: str = "load_mse") -> list[SweepRow]:
    """Evaluate under test-time weather noise, averaging over noise seeds."""
    from .train import evaluate

    rows = []
    for p in proportions:
        runs = [getattr(evaluate(model, samples, mode, NoiseSpec(p, seed=s)), metric)
                for s in (seeds if p > 0 else seeds[:1])]
        rows.append(SweepRow(float(p), float(np.mean(runs)), float(np.std(runs))))
    return rows


def write_sweep(path, rows: Sequence[SweepRow]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("proportion", "mean_mse", "stddev_mse"))
        for r in rows:
            w.writerow((repr(r.proportion), repr(r.mean_mse), repr(r.std_mse)))
