"""Warm start versus cold start on a same-group synthetic district pair.

Ranks candidate sources by MMD, pretrains on the best one, then fine-tunes
under each freezing strategy next to a randomly initialized control.

    python scripts/transfer.py --budgets 32 16 --noise 0 20 --out runs/transfer
"""
import argparse
import json
from pathlib import Path

import numpy as np

from tgdlf.dataset import build_district_dataset, clean
from tgdlf.synthgen import SynthSpec, generate
from tgdlf.train import TrainConfig
from tgdlf.transfer import TransferPlan, rank_sources, transfer_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--budgets", type=int, nargs="+", default=[32], help="target training days")
    ap.add_argument("--test-days", type=int, default=32)
    ap.add_argument("--noise", type=float, nargs="+", default=[0.0], help="weather noise levels in percent")
    ap.add_argument("--epochs", type=int, default=40, help="fine-tuning epochs")
    ap.add_argument("--pretrain-epochs", type=int, default=80)
    ap.add_argument("--out", default="runs/transfer")
    args = ap.parse_args()

    spec = SynthSpec(seed=args.data_seed)
    ds = [build_district_dataset(clean(r), i) for r, i in zip(generate(spec), spec.district_ids())]
    target = ds[-1]
    ranking = rank_sources(target, ds[:-1])
    print("source ranking:", ", ".join(f"{d} {s:.4f}" for d, s in ranking))
    source = next(d for d in ds if d.district_id == ranking[0][0])

    plan = TransferPlan(source.district_id, target.district_id, source_days=source.n_days,
                        target_train_days=tuple(args.budgets), target_test_days=args.test_days,
                        noise_levels=tuple(p / 100 for p in args.noise), pretrain_epochs=args.pretrain_epochs)
    cfg = TrainConfig(epochs=args.epochs, batch_size=32, learning_rate=3e-3)
    report = transfer_experiment(plan, source, target, args.seeds, cfg)

    out = Path(args.out)
    report.write(out / "transfer.csv")
    (out / "curves.json").write_text(json.dumps(report.curves, indent=1) + "\n")
    for budget in args.budgets:
        for p in plan.noise_levels:
            for strategy in ("no_transfer",) + plan.strategies:
                rows = report.select(strategy=strategy, target_days=budget, noise_pct=p)
                e2t = [r.epochs_to_threshold for r in rows if r.epochs_to_threshold is not None]
                print(f"{budget:4d}d noise {p:.0%} {strategy:14s} initial {np.median([r.initial_mse for r in rows]):.4g} "
                      f"final {np.median([r.final_mse for r in rows]):.4g} "
                      f"epochs-to-threshold {np.median(e2t) if e2t else 'never'}")
    print("frozen parameters intact:", all(report.frozen_intact.values()))


if __name__ == "__main__":
    main()
