"""Cross-district transfer: MMD source ranking, freezing strategies, and the
warm-start versus cold-start experiment."""

from __future__ import annotations

import csv
import enum
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .dataset import DistrictDataset
from .decomposition import extract_weekly_trend
from .model import ModelConfig, TransformerModel, param_group
from .robustness import NoiseSpec
from .train import TrainConfig, Windows, district_windows, evaluate, train


class BandwidthError(ValueError):
    pass


class CompatibilityError(ValueError):
    pass


class FreezeStrategy(str, enum.Enum):
    ALL_TRAINABLE = "all_trainable"
    HEAD_ONLY = "head_only"
    BODY_ONLY = "body_only"

    @classmethod
    def parse(cls, text: str) -> "FreezeStrategy":
        aliases = {"all": cls.ALL_TRAINABLE, "head": cls.HEAD_ONLY, "body": cls.BODY_ONLY}
        return aliases.get(text) or cls(text)

    def trainable_groups(self) -> set[str]:
        body = {"embedding", "encoder", "decoder"}
        return {self.ALL_TRAINABLE: body | {"head"}, self.HEAD_ONLY: {"head"},
                self.BODY_ONLY: body}[self]

    def trainable(self, model: TransformerModel) -> set[str]:
        groups = self.trainable_groups()
        return {name for name in model.params if param_group(name) in groups}


# ---------------------------------------------------------------- MMD


def median_bandwidth(pooled: np.ndarray) -> float:
    pooled = np.asarray(pooled, dtype=np.float64)
    pooled = pooled.reshape(len(pooled), -1)
    if len(pooled) < 2:
        raise BandwidthError("median heuristic needs at least two points; pass an explicit bandwidth")
    sigma = float(np.median(pdist(pooled)))
    if sigma <= 0:
        raise BandwidthError("median pairwise distance is zero; pass an explicit bandwidth")
    return sigma


def mmd(x, y, bandwidth: float | str | None = "auto") -> float:
    """Biased (V-statistic) squared MMD with a Gaussian kernel, clipped at 0.

    ``bandwidth="auto"`` uses the median pairwise distance of the pooled sample.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) == 0 or len(y) == 0:
        raise ValueError("both samples must be nonempty")
    x, y = x.reshape(len(x), -1), y.reshape(len(y), -1)
    if bandwidth in (None, "auto"):
        bandwidth = median_bandwidth(np.vstack([x, y]))
    gamma = 1.0 / (2.0 * float(bandwidth) ** 2)
    # fixed argument order makes the result bit-for-bit symmetric
    if (x.shape, x.tobytes()) > (y.shape, y.tobytes()):
        x, y = y, x

    def k(a, b):
        return np.exp(-gamma * cdist(a, b, "sqeuclidean"))

    value = k(x, x).mean() + k(y, y).mean() - 2.0 * k(x, y).mean()
    return max(0.0, float(value))


def daily_ratio_vectors(ds: DistrictDataset) -> np.ndarray:
    return ds.ratio.reshape(ds.n_days, 24)


def rank_sources(target: DistrictDataset, candidates: Sequence[DistrictDataset],
                 bandwidth: float | str | None = "auto") -> list[tuple[str, float]]:
    """Candidates by ascending MMD of daily ratio vectors, ties broken by id.

    With ``"auto"`` one bandwidth (median heuristic over the target and all
    candidates pooled) is shared so the scores are comparable.
    """
    if not candidates:
        raise ValueError("no candidate districts")
    tv = daily_ratio_vectors(target)
    vecs = [daily_ratio_vectors(c) for c in candidates]
    if bandwidth in (None, "auto"):
        bandwidth = median_bandwidth(np.vstack([tv] + vecs))
    scores = [(c.district_id, mmd(tv, v, bandwidth)) for c, v in zip(candidates, vecs)]
    return sorted(scores, key=lambda s: (s[1], s[0]))


# ---------------------------------------------------------------- fine-tuning


def fine_tune(source_model: TransformerModel, target_samples: Windows, strategy: FreezeStrategy,
              cfg: TrainConfig, monitor: Windows | None = None, on_epoch=None):
    """Copy the source model and retrain the parameters the strategy leaves free.

    Target windows must already be decomposed against the source trend.
    Returns ``(model, loss_curve, initial_loss)`` where the initial loss is the
    fluctuation MSE on ``monitor`` (default: the training windows) before any
    update.
    """
    cfg_model = source_model.config
    if target_samples.inputs.shape[1:] != (cfg_model.input_len, cfg_model.n_features):
        raise CompatibilityError(f"target windows {target_samples.inputs.shape[1:]} do not fit "
                                 f"model input ({cfg_model.input_len}, {cfg_model.n_features})")
    strategy = FreezeStrategy(strategy)
    model = source_model.copy()
    check = monitor if monitor is not None else target_samples
    initial = evaluate(model, check).delta_mse
    model, curve = train(model, target_samples, cfg, trainable=strategy.trainable(model),
                         fit_scaling=False, on_epoch=on_epoch)
    return model, curve, initial


# ---------------------------------------------------------------- experiment


@dataclass
class TransferPlan:
    source_district: str
    target_district: str
    source_days: int = 192
    target_train_days: tuple[int, ...] = (128, 64, 32, 16)
    target_test_days: int = 64
    strategies: tuple[str, ...] = ("all_trainable", "head_only", "body_only")
    noise_levels: tuple[float, ...] = (0.0,)
    pretrain_epochs: int | None = None

    def __post_init__(self):
        self.target_train_days = tuple(int(d) for d in self.target_train_days)
        self.strategies = tuple(FreezeStrategy.parse(s).value for s in self.strategies)
        self.noise_levels = tuple(float(p) for p in self.noise_levels)
        if min(self.target_train_days) < 1 or self.target_test_days < 1 or self.source_days < 5:
            raise ValueError("day budgets must be positive (source >= 5)")


@dataclass
class TransferRow:
    strategy: str
    target_days: int
    noise_pct: float
    seed: int
    initial_mse: float
    final_mse: float
    epochs_to_threshold: int | None


@dataclass
class TransferReport:
    rows: list[TransferRow] = field(default_factory=list)
    curves: dict[str, list[float]] = field(default_factory=dict)
    frozen_intact: dict[str, bool] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def select(self, **match) -> list[TransferRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("strategy", "target_days", "noise_pct", "seed", "initial_mse", "final_mse",
                        "epochs_to_threshold"))
            for r in self.rows:
                e2t = "" if r.epochs_to_threshold is None else r.epochs_to_threshold
                w.writerow((r.strategy, r.target_days, repr(r.noise_pct * 100), r.seed,
                            repr(r.initial_mse), repr(r.final_mse), e2t))


def epochs_to_threshold(curve: Sequence[float], threshold: float) -> int | None:
    """First index (0 = before training) whose loss is <= threshold."""
    for i, v in enumerate(curve):
        if v <= threshold:
            return i
    return None


def _split_target(target: DistrictDataset, trend, budget: int, test_days: int, lead: int):
    windows = district_windows(target, trend, lead)
    n = len(windows)
    if budget + test_days > n:
        raise ValueError(f"target {target.district_id} has {n} sample days; plan needs {budget + test_days}")
    test = windows.subset(np.arange(n - test_days, n))
    train_w = windows.subset(np.arange(n - test_days - budget, n - test_days))
    return train_w, test


def frozen_unchanged(before: TransformerModel, after: TransformerModel, strategy: FreezeStrategy) -> bool:
    free = strategy.trainable(before)
    return all(np.array_equal(before.params[k].data, after.params[k].data)
               for k in before.params if k not in free)


def transfer_experiment(plan: TransferPlan, source: DistrictDataset, target: DistrictDataset,
                        seeds: Sequence[int], cfg: TrainConfig | None = None,
                        model_cfg: ModelConfig | None = None) -> TransferReport:
    """Pretrain on the source, fine-tune per strategy and budget, compare to
    a randomly initialized control trained on the same target days.

    Losses are fluctuation (= ratio) MSE on the target test days, tracked
    after every epoch under each noise level. The convergence threshold is
    1.2x the control's final loss for the same seed, budget and noise.
    """
    cfg = cfg or TrainConfig()
    model_cfg = model_cfg or ModelConfig()
    if source.n_days < plan.source_days:
        raise ValueError(f"source has {source.n_days} days; plan needs {plan.source_days}")
    src = source.slice_days(0, plan.source_days)
    trend = extract_weekly_trend(src.ratio_series(), cfg.filter_width)
    src_windows = district_windows(src, trend, cfg.weather_lead)
    report = TransferReport(config={"plan": asdict(plan), "train": asdict(cfg), "model": asdict(model_cfg),
                                    "seeds": list(seeds)})
    pre_epochs = plan.pretrain_epochs if plan.pretrain_epochs is not None else cfg.epochs

    for seed in seeds:
        source_model = TransformerModel.init(model_cfg, seed=seed)
        source_model, _ = train(source_model, src_windows,
                                TrainConfig(**{**asdict(cfg), "seed": seed, "epochs": pre_epochs}))
        for budget in plan.target_train_days:
            train_w, test_w = _split_target(target, trend, budget, plan.target_test_days, cfg.weather_lead)
            noises = {p: NoiseSpec(p, seed=seed * 1000 + i) for i, p in enumerate(plan.noise_levels)}
            run_cfg = TrainConfig(**{**asdict(cfg), "seed": seed})

            def tracked(model):
                curves = {p: [evaluate(model, test_w, noise=n).delta_mse] for p, n in noises.items()}

                def hook(_epoch, m):
                    for p, n in noises.items():
                        curves[p].append(evaluate(m, test_w, noise=n).delta_mse)

                return curves, hook

            runs = {}
            cold = TransformerModel.init(model_cfg, seed=seed + 104729)
            cold.set_input_scaling(train_w.inputs)
            curves, hook = tracked(cold)
            train(cold, train_w, run_cfg, fit_scaling=False, on_epoch=hook)
            runs["no_transfer"] = curves
            for name in plan.strategies:
                strategy = FreezeStrategy(name)
                curves, hook = tracked(source_model)
                tuned, _, _ = fine_tune(source_model, train_w, strategy, run_cfg, on_epoch=hook)
                runs[name] = curves
                key = f"{name}_{budget}_seed{seed}"
                report.frozen_intact[key] = frozen_unchanged(source_model, tuned, strategy)
            for p in plan.noise_levels:
                threshold = 1.2 * runs["no_transfer"][p][-1]
                for name in ("no_transfer",) + plan.strategies:
                    curve = runs[name][p]
                    report.rows.append(TransferRow(name, budget, p, seed, curve[0], curve[-1],
                                                   epochs_to_threshold(curve, threshold)))
                    report.curves[f"{name}_{budget}d_noise{p:g}_seed{seed}"] = curve
    return report
