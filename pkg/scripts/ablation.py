"""Ablation over seeds: 4-fold CV load MSE for full, transformer_only and dt_only.

    python scripts/ablation.py --seeds 0 1 2 3 4 --out runs/ablation
"""
import argparse
import csv
from pathlib import Path

import numpy as np

from tgdlf.dataset import build_district_dataset, clean
from tgdlf.synthgen import SynthSpec, generate
from tgdlf.train import MODES, TrainConfig, cross_validate


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--epochs", type=int, default=80)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    out = Path(args.out)
    rows = []
    for seed in args.seeds:
        spec = SynthSpec(seed=seed)
        districts = [build_district_dataset(clean(r), i) for r, i in zip(generate(spec), spec.district_ids())]
        for mode in MODES:
            cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                              ablation_mode=mode, seed=seed)
            report = cross_validate(districts, 4, cfg, workers=args.workers)
            report.write(out / f"seed{seed}", f"crossval_{mode}")
            ratio, load = report.average(mode)
            rows.append((seed, mode, ratio, load))
            print(f"seed {seed} {mode:16s} ratio_mse {ratio:.5g} load_mse {load:.5g}", flush=True)

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("seed", "mode", "ratio_mse", "load_mse"))
        w.writerows((s, m, repr(r), repr(l)) for s, m, r, l in rows)
        for mode in MODES:
            med = np.median([[r, l] for _, m, r, l in rows if m == mode], axis=0)
            w.writerow(("median", mode, repr(float(med[0])), repr(float(med[1]))))
            print(f"median {mode:16s} ratio_mse {med[0]:.5g} load_mse {med[1]:.5g}")


if __name__ == "__main__":
    main()
