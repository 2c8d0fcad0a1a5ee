"""Command-line front end: ``tgdlf <subcommand> [--config run.json] [flags]``.

Every run writes under ``--out``: ``config.json`` (the resolved config),
``manifest.json`` (command, timestamps, written files) and whichever of
``metrics/``, ``attention/``, ``checkpoints/``, ``curves/`` and ``data/`` it
produces. Timestamps appear only in the manifest.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .dataset import build_district_dataset, clean, load_districts, write_dataset, write_raw
from .decomposition import export_trend, extract_weekly_trend, read_trend
from .model import ModelConfig, TransformerModel, export_attention, gradient_check
from .robustness import SWEEP_PROPORTIONS, NoiseSpec, noise_sweep, write_sweep
from .synthgen import SynthSpec, generate, inject_gaps_and_spikes
from .train import (MODES, ExperimentReport, ReportRow, TrainConfig, Windows, cross_validate,
                    district_windows, evaluate, fit_trend, train)
from .transfer import FreezeStrategy, TransferPlan, rank_sources, transfer_experiment

GRADCHECK_TOLERANCE = 1e-4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: str | None = None  # directory of raw district CSVs; synthesized when absent
    out: str = "runs/latest"
    folds: int = 4
    workers: int = 1
    source: str | None = None
    target: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    transfer: dict = field(default_factory=dict)  # TransferPlan fields except the district ids
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(0.0))


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "synth": SynthSpec, "noise": NoiseSpec}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key: {where}.{key}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_run_config(path=None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    values = {}
    for key, value in raw.items():
        if key not in top:
            raise ConfigError(f"unknown config key: {key}")
        if key in _SECTIONS:
            values[key] = _build(_SECTIONS[key], value, key)
        elif key == "transfer":
            plan_keys = {f.name for f in dataclasses.fields(TransferPlan)} - {"source_district", "target_district"}
            for k in value:
                if k not in plan_keys:
                    raise ConfigError(f"unknown config key: transfer.{k}")
            values[key] = dict(value)
        else:
            values[key] = value
    return RunConfig(**values)


def _override(obj, **changes):
    changes = {k: v for k, v in changes.items() if v is not None}
    return dataclasses.replace(obj, **changes) if changes else obj


# ---------------------------------------------------------------- run context


class Run:
    def __init__(self, command: str, cfg: RunConfig, argv: list[str]):
        self.command, self.cfg, self.argv = command, cfg, argv
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.started = dt.datetime.now(dt.timezone.utc)
        self.files: list[str] = []

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def record(self, *paths):
        self.files += [str(Path(p).relative_to(self.out)) if Path(p).is_relative_to(self.out) else str(p)
                       for p in paths]

    def finish(self, status: int = 0):
        echo = self.path("config.json")
        echo.write_text(json.dumps(_jsonable(asdict(self.cfg)), indent=2, sort_keys=True) + "\n")
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "started": self.started.isoformat(),
            "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
            "status": status,
            "files": sorted(set(self.files + ["config.json"])),
        }
        self.path("manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _districts(cfg: RunConfig):
    if cfg.data:
        if not Path(cfg.data).is_dir():
            raise FileNotFoundError(f"data directory not found: {cfg.data}")
        return load_districts(cfg.data)
    return [build_district_dataset(clean(raw), did)
            for raw, did in zip(generate(cfg.synth), cfg.synth.district_ids())]


def _pick(districts, district_id):
    for d in districts:
        if d.district_id == district_id:
            return d
    raise ValueError(f"no district {district_id!r}; have {[d.district_id for d in districts]}")


# ---------------------------------------------------------------- subcommands


def cmd_synth(run: Run, args):
    spec = run.cfg.synth
    for i, (raw, did) in enumerate(zip(generate(spec), spec.district_ids())):
        if args.gaps or args.spikes:
            raw, _ = inject_gaps_and_spikes(raw, args.gaps, args.spikes, seed=spec.seed + i)
        p = run.path("data", f"{did}.csv")
        write_raw(p, raw)
        run.record(p)
        print(p)


def cmd_preprocess(run: Run, args):
    for d in _districts(run.cfg):
        p = run.path("data", "processed", f"{d.district_id}.csv")
        write_dataset(p, d)
        run.record(p)
        print(f"{d.district_id}: {d.n_days} days -> {p}")


def cmd_trend(run: Run, args):
    districts = _districts(run.cfg)
    trend = extract_weekly_trend([d.ratio_series() for d in districts], run.cfg.train.filter_width)
    p = Path(args.export) if args.export else run.path("metrics", "trend.csv")
    p.parent.mkdir(parents=True, exist_ok=True)
    export_trend(trend, p)
    run.record(p)
    print(p)


def cmd_train(run: Run, args):
    cfg = run.cfg.train
    districts = _districts(run.cfg)
    trend = fit_trend(districts, cfg.filter_width, cfg.ablation_mode)
    windows = Windows.concat([district_windows(d, trend, cfg.weather_lead) for d in districts])
    model = TransformerModel.init(run.cfg.model, seed=cfg.seed)
    model, curve = train(model, windows, cfg)
    ckpt = run.path("checkpoints", "model.npz")
    model.save(ckpt)
    trend_path = run.path("checkpoints", "trend.csv")
    export_trend(trend, trend_path)
    curve_path = run.path("curves", f"train_{cfg.ablation_mode}.csv")
    curve_path.write_text("epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(curve)))
    run.record(ckpt, ckpt.with_suffix(".json"), trend_path, curve_path)
    print(f"trained {len(curve)} epochs, final loss {curve[-1] if curve else float('nan'):.6g} -> {ckpt}")


def cmd_crossval(run: Run, args):
    report = cross_validate(_districts(run.cfg), run.cfg.folds, run.cfg.train, run.cfg.model,
                            workers=run.cfg.workers)
    paths = report.write(run.out, f"crossval_{run.cfg.train.ablation_mode}")
    run.record(*paths.values())
    for d, mode, ratio, load, _ in report.table():
        print(f"{d:>10} {mode:>16} ratio_mse={ratio:.6g} load_mse={load:.6g}")


def _load_checkpoint(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    trend_path = ckpt.with_name("trend.csv")
    if not trend_path.exists():
        raise FileNotFoundError(f"trend file not found next to checkpoint: {trend_path}")
    return TransformerModel.load(ckpt), read_trend(trend_path)


def cmd_evaluate(run: Run, args):
    cfg = run.cfg.train
    model, trend = _load_checkpoint(args)
    noise = run.cfg.noise if run.cfg.noise.proportion > 0 else None
    report = ExperimentReport(config={"checkpoint": str(args.checkpoint), "noise": asdict(run.cfg.noise)})
    for d in _districts(run.cfg):
        res = evaluate(model, district_windows(d, trend, cfg.weather_lead), cfg.ablation_mode, noise)
        report.rows.append(ReportRow(d.district_id, cfg.ablation_mode, res.ratio_mse, res.load_mse, 0))
    paths = report.write(run.out, "evaluate")
    run.record(*paths.values())
    for d, mode, ratio, load, _ in report.table():
        print(f"{d:>10} ratio_mse={ratio:.6g} load_mse={load:.6g}")


def cmd_noise_sweep(run: Run, args):
    cfg = run.cfg.train
    model, trend = _load_checkpoint(args)
    windows = Windows.concat([district_windows(d, trend, cfg.weather_lead) for d in _districts(run.cfg)])
    proportions = SWEEP_PROPORTIONS if args.noise is None else (0.0, args.noise / 100.0)
    rows = noise_sweep(model, windows, proportions, mode=cfg.ablation_mode)
    p = run.path("metrics", "noise_sweep.csv")
    write_sweep(p, rows)
    run.record(p)
    for r in rows:
        print(f"{r.proportion * 100:5.1f}%  mse={r.mean_mse:.6g} +/- {r.std_mse:.3g}")


def cmd_transfer(run: Run, args):
    districts = _districts(run.cfg)
    target = _pick(districts, run.cfg.target or districts[-1].district_id)
    if run.cfg.source:
        source = _pick(districts, run.cfg.source)
    else:
        ranking = rank_sources(target, [d for d in districts if d is not target])
        source = _pick(districts, ranking[0][0])
        p = run.path("metrics", "source_ranking.csv")
        p.write_text("district,mmd\n" + "".join(f"{i},{v!r}\n" for i, v in ranking))
        run.record(p)
    plan_values = dict(run.cfg.transfer)
    if args.strategy:
        plan_values["strategies"] = (FreezeStrategy.parse(args.strategy).value,)
    if args.noise is not None:
        plan_values["noise_levels"] = (args.noise / 100.0,)
    plan = TransferPlan(source.district_id, target.district_id, **plan_values)
    seeds = args.seeds if args.seeds else [run.cfg.train.seed]
    report = transfer_experiment(plan, source, target, seeds, run.cfg.train, run.cfg.model)
    p = run.path("metrics", "transfer.csv")
    report.write(p)
    run.record(p)
    for key, curve in report.curves.items():
        cp = run.path("curves", f"transfer_{key}.csv")
        cp.write_text("epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(curve)))
        run.record(cp)
    print(f"source {source.district_id} -> target {target.district_id}")
    for r in report.rows:
        print(f"{r.strategy:>14} days={r.target_days:<4} seed={r.seed} initial={r.initial_mse:.5g} "
              f"final={r.final_mse:.5g} epochs_to_threshold={r.epochs_to_threshold}")


def cmd_attention_dump(run: Run, args):
    cfg = run.cfg.train
    model, trend = _load_checkpoint(args)
    d = _districts(run.cfg)[0] if not run.cfg.target else _pick(_districts(run.cfg), run.cfg.target)
    windows = district_windows(d, trend, cfg.weather_lead)
    if not 0 <= args.sample < len(windows):
        raise ValueError(f"sample {args.sample} out of range (0..{len(windows) - 1})")
    _, dump = model.forward(windows.inputs[args.sample:args.sample + 1])
    written = export_attention(dump, run.out / "attention")
    run.record(*written)
    print(f"{len(written)} attention matrices for {d.district_id} sample {args.sample} -> {run.out / 'attention'}")


def cmd_gradcheck(run: Run, args):
    err = gradient_check(run.cfg.model, seed=run.cfg.train.seed)
    p = run.path("metrics", "gradcheck.json")
    p.write_text(json.dumps({"max_relative_error": err, "tolerance": GRADCHECK_TOLERANCE}, indent=2) + "\n")
    run.record(p)
    print(f"max relative error {err:.3e}")
    if not err < GRADCHECK_TOLERANCE:
        print(f"gradient check failed: {err:.3e} >= {GRADCHECK_TOLERANCE:g}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "trend": cmd_trend,
    "train": cmd_train,
    "crossval": cmd_crossval,
    "evaluate": cmd_evaluate,
    "noise-sweep": cmd_noise_sweep,
    "transfer": cmd_transfer,
    "attention-dump": cmd_attention_dump,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; unknown keys are rejected")
    common.add_argument("--seed", type=int, help="overrides train.seed and synth.seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="directory of raw district CSVs (default: synthesize)")
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--epochs", type=int)

    parser = argparse.ArgumentParser(prog="tgdlf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "synth":
            p.add_argument("--gaps", type=int, default=0, help="missing runs to inject per district")
            p.add_argument("--spikes", type=int, default=0, help="load spikes to inject per district")
        if name == "trend":
            p.add_argument("--export", help="trend file path (default: <out>/metrics/trend.csv)")
        if name in ("evaluate", "noise-sweep", "attention-dump"):
            p.add_argument("--checkpoint", required=True, help="model .npz written by `train`")
        if name in ("evaluate", "noise-sweep", "transfer"):
            p.add_argument("--noise", type=float, help="weather noise in percent")
        if name == "attention-dump":
            p.add_argument("--sample", type=int, default=0)
            p.add_argument("--district", help="district id (default: first)")
        if name == "transfer":
            p.add_argument("--strategy", choices=("all", "head", "body"))
            p.add_argument("--source", help="source district (default: lowest MMD)")
            p.add_argument("--target", help="target district (default: last)")
            p.add_argument("--seeds", type=int, nargs="+")
    return parser


def resolve(args) -> RunConfig:
    cfg = load_run_config(args.config)
    cfg = _override(cfg, out=args.out, data=args.data,
                    source=getattr(args, "source", None),
                    target=getattr(args, "target", None) or getattr(args, "district", None))
    cfg.train = _override(cfg.train, seed=args.seed, ablation_mode=args.mode, epochs=args.epochs)
    cfg.synth = _override(cfg.synth, seed=args.seed)
    if getattr(args, "noise", None) is not None:
        cfg.noise = NoiseSpec(args.noise / 100.0, cfg.noise.seed if args.seed is None else args.seed)
    return cfg


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
    except ConfigError as exc:
        parser.exit(2, f"tgdlf: config error: {exc}\n")
    run = Run(args.command, cfg, argv)
    try:
        status = COMMANDS[args.command](run, args) or 0
    except FileNotFoundError as exc:
        print(f"tgdlf: file error: {exc}", file=sys.stderr)
        status = 1
    except (ValueError, KeyError) as exc:
        print(f"tgdlf: error: {exc}", file=sys.stderr)
        status = 1
    run.finish(status)
    return status


if __name__ == "__main__":
    sys.exit(main())
