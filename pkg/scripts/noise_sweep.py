"""Test-time weather noise sweep, 0-60%, per seed and median over seeds.

Each seed trains a full model on three synthetic districts and sweeps the
fourth.

    python scripts/noise_sweep.py --out runs/noise
"""
import argparse
import csv
from pathlib import Path

import numpy as np

from tgdlf.dataset import build_district_dataset, clean
from tgdlf.model import ModelConfig, TransformerModel
from tgdlf.robustness import SWEEP_PROPORTIONS, noise_sweep, write_sweep
from tgdlf.synthgen import SynthSpec, generate
from tgdlf.train import TrainConfig, Windows, district_windows, fit_trend, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--epochs", type=int, default=80)
    ap.add_argument("--noise-seeds", type=int, default=5, help="noise draws averaged per proportion")
    ap.add_argument("--out", default="runs/noise")
    args = ap.parse_args()

    out = Path(args.out)
    curves = []
    for seed in args.seeds:
        spec = SynthSpec(seed=seed)
        ds = [build_district_dataset(clean(r), i) for r, i in zip(generate(spec), spec.district_ids())]
        trend = fit_trend(ds[:3], 5)
        windows = Windows.concat([district_windows(d, trend) for d in ds[:3]])
        cfg = TrainConfig(epochs=args.epochs, batch_size=32, learning_rate=3e-3, seed=seed)
        model, _ = train(TransformerModel.init(ModelConfig(), seed=seed), windows, cfg)
        rows = noise_sweep(model, district_windows(ds[3], trend), seeds=range(args.noise_seeds))
        write_sweep(out / f"noise_sweep_seed{seed}.csv", rows)
        curves.append([r.mean_mse for r in rows])
        print(f"seed {seed}: " + " ".join(f"{r.mean_mse:.4g}" for r in rows), flush=True)

    med = np.median(curves, axis=0)
    with open(out / "noise_sweep_median.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("proportion", "median_load_mse"))
        w.writerows((repr(p), repr(float(v))) for p, v in zip(SWEEP_PROPORTIONS, med))
    print("median: " + " ".join(f"{int(p * 100)}%={v:.4g}" for p, v in zip(SWEEP_PROPORTIONS, med)))


if __name__ == "__main__":
    main()
