"""Moving-window samples, Adam training, evaluation and k-fold cross-validation."""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import numcore as nc
from .dataset import DistrictDataset, InsufficientDataError
from .decomposition import (DimensionlessTrend, FluctuationSeries, decompose,
                            extract_weekly_trend, recompose_load)
from .model import ModelConfig, TransformerModel
from .robustness import NoiseSpec, perturb_inputs

MODES = ("full", "dt_only", "transformer_only")
INPUT_DAYS = 4


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at epoch {epoch}")
        self.epoch = epoch


@dataclass
class Sample:
    input: np.ndarray  # [96, 9]
    target_delta: np.ndarray  # [24]
    target_ratio: np.ndarray  # [24]
    prev_day_load: np.ndarray  # [24]
    day_index: int


@dataclass
class Windows:
    """Stacked samples of one or more districts."""

    inputs: np.ndarray  # [N, 96, 9]
    target_delta: np.ndarray  # [N, 24]
    target_ratio: np.ndarray  # [N, 24]
    prev_day_load: np.ndarray  # [N, 24]
    day_index: np.ndarray  # [N]
    district: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.inputs)

    def __getitem__(self, i) -> Sample:
        return Sample(self.inputs[i], self.target_delta[i], self.target_ratio[i],
                      self.prev_day_load[i], int(self.day_index[i]))

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    @property
    def target_trend(self) -> np.ndarray:
        return self.target_ratio - self.target_delta

    @property
    def target_load(self) -> np.ndarray:
        return recompose_load(self.target_ratio, self.prev_day_load)

    def subset(self, idx) -> "Windows":
        idx = np.asarray(idx)
        return Windows(self.inputs[idx], self.target_delta[idx], self.target_ratio[idx],
                       self.prev_day_load[idx], self.day_index[idx],
                       [self.district[i] for i in np.atleast_1d(idx)] if self.district else [])

    def with_inputs(self, inputs: np.ndarray) -> "Windows":
        return Windows(inputs, self.target_delta, self.target_ratio, self.prev_day_load,
                       self.day_index, list(self.district))

    @staticmethod
    def concat(parts: Sequence["Windows"]) -> "Windows":
        return Windows(*(np.concatenate([getattr(p, k) for p in parts])
                         for k in ("inputs", "target_delta", "target_ratio", "prev_day_load", "day_index")),
                       [d for p in parts for d in p.district])


def make_windows(dataset: DistrictDataset, fluctuation: FluctuationSeries, weather_lead: int = 1) -> Windows:
    """One sample per target day ``d >= 4``: ratio history of days d-4..d-1.

    Weather and calendar columns are shifted ``weather_lead`` days ahead, so
    with the default the last input day carries the target day's
    (forecast) weather and flags.
    """
    n_days = dataset.n_days
    if n_days < INPUT_DAYS + 1:
        raise InsufficientDataError(f"{dataset.district_id}: need >= 5 ratio days, have {n_days}")
    if len(fluctuation) != len(dataset.features):
        raise ValueError("fluctuation and dataset lengths differ")
    if not 0 <= weather_lead <= 1:
        raise ValueError("weather_lead must be 0 or 1")
    feats = dataset.features.reshape(n_days, 24, -1)
    delta = fluctuation.values.reshape(n_days, 24)
    ratio = feats[:, :, 0]
    load = dataset.load.reshape(n_days, 24)
    days = np.arange(INPUT_DAYS, n_days)
    inputs = np.empty((len(days), INPUT_DAYS * 24, feats.shape[-1]))
    for j, d in enumerate(days):
        hist = feats[d - INPUT_DAYS:d].reshape(-1, feats.shape[-1])
        inputs[j, :, 0] = hist[:, 0]
        side = feats[d - INPUT_DAYS + weather_lead:d + weather_lead].reshape(-1, feats.shape[-1])
        inputs[j, :, 1:] = side[:, 1:]
    return Windows(inputs, delta[days].copy(), ratio[days].copy(), load[days - 1].copy(), days,
                   [dataset.district_id] * len(days))


def district_windows(dataset: DistrictDataset, trend: DimensionlessTrend, weather_lead: int = 1) -> Windows:
    return make_windows(dataset, decompose(dataset.ratio_series(), trend), weather_lead)


def mse(pred, actual) -> float:
    pred, actual = np.asarray(pred, dtype=np.float64), np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape or pred.size == 0:
        raise nc.ShapeError(f"mse needs equal nonempty shapes, got {pred.shape} and {actual.shape}")
    return float(np.mean((pred - actual) ** 2))


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    batch_size: int = 512
    epochs: int = 200
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    ablation_mode: str = "full"
    train_noise: float = 0.05
    filter_width: int = 5
    weather_lead: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.ablation_mode not in MODES:
            raise ValueError(f"ablation_mode must be one of {MODES}")


class Adam:
    def __init__(self, params: dict[str, nc.Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def train(model: TransformerModel, samples: Windows, cfg: TrainConfig, trainable: set[str] | None = None,
          fit_scaling: bool = True,
          on_epoch: Callable[[int, TransformerModel], None] | None = None) -> tuple[TransformerModel, list[float]]:
    """Minimize MSE between predicted and target fluctuation with Adam.

    Only parameters named in ``trainable`` (default: all) are updated; the
    rest are never written. ``on_epoch(e, model)`` runs after each epoch.
    The returned curve holds the mean training loss of every epoch.
    """
    if len(samples) == 0:
        raise ValueError("no training samples")
    rng = np.random.default_rng(cfg.seed)
    inputs = samples.inputs
    if cfg.train_noise > 0:
        inputs = perturb_inputs(inputs, NoiseSpec(cfg.train_noise, seed=cfg.seed + 7919))
    if fit_scaling:
        model.set_input_scaling(samples.inputs)
    names = list(model.params) if trainable is None else [k for k in model.params if k in trainable]
    opt = Adam({k: model.params[k] for k in names}, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.eps)
    frozen = [p for k, p in model.params.items() if k not in set(names)]
    for p in frozen:
        p.requires_grad = False
    targets = samples.target_delta
    curve = []
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(samples))
            total = 0.0
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                model.zero_grad()
                pred, _ = model.forward(inputs[idx], collect_attention=False)
                loss = nc.mse_loss(pred, targets[idx])
                nc.backward(loss)
                opt.step()
                total += float(loss.data) * len(idx)
            epoch_loss = total / len(order)
            if not np.isfinite(epoch_loss):
                raise TrainingError(epoch, epoch_loss)
            curve.append(epoch_loss)
            if on_epoch is not None:
                on_epoch(epoch, model)
    finally:
        for p in frozen:
            p.requires_grad = True
            p.grad = np.zeros_like(p.data)
    return model, curve


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    ratio_mse: float
    load_mse: float
    delta_mse: float
    predicted_ratio: np.ndarray = field(repr=False, default=None)


def predict_ratio(model: TransformerModel | None, samples: Windows, mode: str = "full") -> np.ndarray:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    trend = samples.target_trend
    if mode == "dt_only":
        return trend.copy()
    return model.predict(samples.inputs) + trend


def load_scale(samples: Windows) -> float:
    """Std of the observed (previous-day) loads: known at forecast time."""
    s = float(np.std(samples.prev_day_load))
    return s if s > 0 else 1.0


def evaluate(model: TransformerModel | None, samples: Windows, mode: str = "full",
             noise: NoiseSpec | None = None) -> EvalResult:
    """Ratio-scale and standardized-load-scale MSE of one sample set.

    ``transformer_only`` expects windows built against a zero trend, so the
    model output is the ratio itself. ``noise`` perturbs the input weather.
    """
    if noise is not None and noise.proportion > 0:
        samples = samples.with_inputs(perturb_inputs(samples.inputs, noise))
    ratio_hat = predict_ratio(model, samples, mode)
    load_hat = recompose_load(ratio_hat, samples.prev_day_load)
    scale = load_scale(samples)
    return EvalResult(
        ratio_mse=mse(ratio_hat, samples.target_ratio),
        load_mse=mse(load_hat / scale, samples.target_load / scale),
        delta_mse=mse(ratio_hat - samples.target_trend, samples.target_delta),
        predicted_ratio=ratio_hat,
    )


# ---------------------------------------------------------------- reports


@dataclass
class ReportRow:
    district: str
    mode: str
    ratio_mse: float
    load_mse: float
    epochs: int
    fold: int = 0
    seconds: float = 0.0


@dataclass
class ExperimentReport:
    rows: list[ReportRow] = field(default_factory=list)
    curves: dict[str, list[float]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def average(self, mode: str | None = None) -> tuple[float, float]:
        rows = [r for r in self.rows if mode is None or r.mode == mode]
        return (float(np.mean([r.ratio_mse for r in rows])), float(np.mean([r.load_mse for r in rows])))

    def table(self) -> list[tuple[str, str, float, float, int]]:
        out = []
        for mode in dict.fromkeys(r.mode for r in self.rows):
            rows = [r for r in self.rows if r.mode == mode]
            out += [(r.district, r.mode, r.ratio_mse, r.load_mse, r.epochs) for r in rows]
            ratio, load = self.average(mode)
            out.append(("AVG", mode, ratio, load, rows[0].epochs))
        return out

    def seconds(self) -> float:
        return float(sum({(r.mode, r.fold): r.seconds for r in self.rows}.values()))

    def write(self, out_dir, name: str = "crossval") -> dict[str, Path]:
        """Metrics CSV, JSON summary and per-run ``epoch,loss`` curves.

        Wall-clock times are left out so reruns are byte-identical.
        """
        out_dir = Path(out_dir)
        (out_dir / "metrics").mkdir(parents=True, exist_ok=True)
        (out_dir / "curves").mkdir(parents=True, exist_ok=True)
        metrics = out_dir / "metrics" / f"{name}.csv"
        with open(metrics, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("district", "mode", "ratio_mse", "load_mse", "epochs"))
            for d, mode, ratio, load, epochs in self.table():
                w.writerow((d, mode, repr(ratio), repr(load), epochs))
        summary = out_dir / "metrics" / f"{name}_summary.json"
        payload = {
            "rows": [{k: v for k, v in asdict(r).items() if k != "seconds"} for r in self.rows],
            "average": {m: dict(zip(("ratio_mse", "load_mse"), self.average(m)))
                        for m in dict.fromkeys(r.mode for r in self.rows)},
            "config": self.config,
        }
        summary.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        paths = {"metrics": metrics, "summary": summary}
        for key, curve in self.curves.items():
            path = out_dir / "curves" / f"{name}_{key}.csv"
            path.write_text("epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(curve)))
            paths[f"curve:{key}"] = path
        return paths


# ---------------------------------------------------------------- cross-validation


def fold_assignment(district_ids: Sequence[str], folds: int) -> list[list[str]]:
    """Contiguous chunks of the sorted ids; the last fold takes the remainder."""
    ids = sorted(district_ids)
    if len(ids) < folds:
        raise ValueError(f"need at least {folds} districts for {folds} folds, got {len(ids)}")
    size = len(ids) // folds
    return [ids[i * size:(i + 1) * size] if i < folds - 1 else ids[i * size:] for i in range(folds)]


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def fit_trend(datasets: Sequence[DistrictDataset], filter_width: int, mode: str = "full") -> DimensionlessTrend:
    if mode == "transformer_only":
        return DimensionlessTrend.zeros()
    return extract_weekly_trend([d.ratio_series() for d in datasets], filter_width)


def run_fold(train_sets: Sequence[DistrictDataset], test_sets: Sequence[DistrictDataset],
             cfg: TrainConfig, model_cfg: ModelConfig, fold: int = 0) -> tuple[list[ReportRow], list[float]]:
    start = time.perf_counter()
    mode = cfg.ablation_mode
    trend = fit_trend(train_sets, cfg.filter_width, mode)
    model, curve = None, []
    if mode != "dt_only":
        seed = fold_seed(cfg.seed, fold)
        windows = Windows.concat([district_windows(d, trend, cfg.weather_lead) for d in train_sets])
        model = TransformerModel.init(model_cfg, seed=seed)
        model, curve = train(model, windows, TrainConfig(**{**asdict(cfg), "seed": seed}))
    rows = []
    for ds in test_sets:
        res = evaluate(model, district_windows(ds, trend, cfg.weather_lead), mode)
        rows.append(ReportRow(ds.district_id, mode, res.ratio_mse, res.load_mse, len(curve), fold))
    elapsed = time.perf_counter() - start
    for r in rows:
        r.seconds = elapsed
    return rows, curve


def _run_fold_job(args):
    return run_fold(*args)


def cross_validate(districts: Sequence[DistrictDataset], folds: int = 4, cfg: TrainConfig | None = None,
                   model_cfg: ModelConfig | None = None, fold_map: Sequence[Sequence[str]] | None = None,
                   workers: int = 1) -> ExperimentReport:
    """Each fold serves once as the test set; trend and scaling come from the rest.

    Folds are independent and seeded by (seed, fold), so ``workers > 1``
    gives the same report as a sequential run.
    """
    cfg = cfg or TrainConfig()
    model_cfg = model_cfg or ModelConfig()
    by_id = {d.district_id: d for d in districts}
    if len(by_id) != len(districts):
        raise ValueError("district ids must be unique")
    assignment = [list(f) for f in fold_map] if fold_map is not None else fold_assignment(list(by_id), folds)
    jobs = []
    for k, test_ids in enumerate(assignment):
        train_ids = [i for j, f in enumerate(assignment) if j != k for i in f]
        jobs.append(([by_id[i] for i in sorted(train_ids)], [by_id[i] for i in test_ids], cfg, model_cfg, k))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_fold_job, jobs))
    else:
        results = [run_fold(*job) for job in jobs]
    report = ExperimentReport(config={"train": asdict(cfg), "model": asdict(model_cfg),
                                      "folds": assignment})
    for k, (rows, curve) in enumerate(results):
        report.rows.extend(rows)
        if curve:
            report.curves[f"{cfg.ablation_mode}_fold{k}"] = curve
    return report
