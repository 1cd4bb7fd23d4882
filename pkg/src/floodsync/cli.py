"""Command-line experiment runner.

    floodsync run <config|preset> --seed S [--trials T] [--out DIR] [--trace]
    floodsync sweep <config|preset> --periods 30,150,300 [--protocols a,b]
    floodsync presets

Exit codes: 0 success, 2 invalid configuration, 3 one or more trials failed.
"""

import argparse
import dataclasses
import sys
from pathlib import Path

from floodsync.config import ConfigError, load_config, preset_names
from floodsync.experiment import run_experiment, sweep, write_sweep_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRIAL = 3


def _apply_overrides(cfg, args):
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "trials", None) is not None:
        updates["trials"] = args.trials
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
        cfg.validate()
    if cfg.seed is None:
        raise ConfigError("a seed is required for reproducible artifacts; "
                          "set it in the config or pass --seed")
    return cfg


def _cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    name = Path(args.config).stem
    agg = run_experiment(cfg, args.out, name=name, trace=args.trace)
    base = Path(args.out) / name / str(cfg.seed)
    print(f"wrote {base}/summary.json ({cfg.trials} trial(s), "
          f"{len(agg['trials_failed'])} failed)")
    return EXIT_TRIAL if agg["trials_failed"] else EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    try:
        periods = [float(p) for p in args.periods.split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"bad --periods value {args.periods!r}")
    if not periods:
        raise ConfigError("--periods must list at least one sync period")
    protocols = None
    if args.protocols:
        protocols = [p.strip() for p in args.protocols.split(",") if p.strip()]
    name = Path(args.config).stem
    rows = sweep(cfg, periods, protocols=protocols, out_dir=args.out,
                 name=name)
    out_csv = Path(args.out) / f"{name}_sweep.csv"
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out_csv)
    print(f"wrote {out_csv} ({len(rows)} cells)")
    return EXIT_OK


def _cmd_presets(_args) -> int:
    for name in preset_names():
        print(name)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="floodsync",
        description="flooding time synchronization experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("config", help="bundled preset name or JSON file path")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--trials", type=int, default=None)
    p_run.add_argument("--out", default="out")
    p_run.add_argument("--trace", action="store_true",
                       help="write trace.ndjson and snapshots.csv")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="sync-period sweep")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--periods", required=True,
                         help="comma list of sync periods in seconds")
    p_sweep.add_argument("--protocols", default=None,
                         help="comma list of protocol ids (default: config's)")
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--trials", type=int, default=None)
    p_sweep.add_argument("--out", default="out")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_presets = sub.add_parser("presets", help="list bundled presets")
    p_presets.set_defaults(func=_cmd_presets)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
