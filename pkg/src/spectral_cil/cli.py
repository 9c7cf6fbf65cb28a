"""Command-line entry point.

Subcommands: ``run`` (the full protocol), ``grid`` (the replacement-rate x
maturity sensitivity sweep), ``gen-data`` (export a synthetic dataset as
CSV), and ``analyze`` (weight statistics of a saved checkpoint). Flags
override the JSON config. Failures exit nonzero with a machine-readable
JSON error on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import ConfigError, ExperimentConfig
from .data import save_csv
from .metrics import MetricError, kde, layer_stats
from .runner import (build_dataset, emit_grid_reports, emit_reports,
                     run_experiment, run_sensitivity_grid)


def _add_override_flags(parser):
    parser.add_argument("--config", help="path to a JSON config")
    parser.add_argument("--strategy", action="append", dest="strategies",
                        help="restrict to this strategy (repeatable)")
    parser.add_argument("--cb", action="store_true", default=None,
                        help="enable continual backpropagation")
    parser.add_argument("--rho", type=float, help="CB replacement rate")
    parser.add_argument("--maturity", type=float, help="CB maturity threshold")
    parser.add_argument("--rounds", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--scale", type=float, help="class-count scale factor")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--out", help="output directory")


def _load_config(args) -> ExperimentConfig:
    if args.config:
        config = ExperimentConfig.from_json_file(args.config)
    else:
        config = ExperimentConfig()
    if args.strategies:
        config.strategies = args.strategies
    if args.cb is not None:
        config.cb_enabled = args.cb
    if args.rho is not None:
        config.cb_rho = args.rho
    if args.maturity is not None:
        config.cb_maturity = args.maturity
    if args.rounds is not None:
        config.rounds = args.rounds
    if args.seed is not None:
        config.seed = args.seed
    if args.scale is not None:
        config.scale = args.scale
    if args.epochs is not None:
        config.epochs = args.epochs
    if args.out:
        config.out_dir = args.out
    return config.validate()


def cmd_run(args):
    config = _load_config(args)
    report = run_experiment(config)
    emit_reports(report, config.out_dir)
    print(f"run complete: {len(report.records)} task records -> "
          f"{config.out_dir}")
    return 0


def cmd_grid(args):
    config = _load_config(args)
    grid = run_sensitivity_grid(config)
    emit_grid_reports(grid, config.out_dir)
    print(f"grid complete: {len(grid.cells)} cells -> {config.out_dir}")
    return 0


def cmd_gen_data(args):
    config = _load_config(args)
    dataset = build_dataset(config)
    save_csv(dataset, args.out_csv, header=args.header)
    print(f"wrote {dataset.n} samples x {dataset.bands} bands -> "
          f"{args.out_csv}")
    return 0


def cmd_analyze(args):
    with np.load(args.checkpoint) as bundle:
        arrays = {name: bundle[name] for name in bundle.files}
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    base = os.path.splitext(os.path.basename(args.checkpoint))[0]
    rows = ["layer,count,mean,std,skewness,kurtosis"]
    for name in sorted(arrays):
        arr = arrays[name]
        try:
            st = layer_stats(arr)
            rows.append(f"{name},{arr.size},{st.mean:.9e},{st.std:.9e},"
                        f"{st.skewness:.9e},{st.kurtosis:.9e}")
        except MetricError:
            continue
    path = os.path.join(out_dir, f"{base}_stats.csv")
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")
    print(f"wrote {path}")
    kernels = [n for n in sorted(arrays) if n.endswith("conv.weight")
               or n.endswith("bn.gamma")]
    for name in kernels[-2:]:
        grid, density = kde(arrays[name])
        safe = name.replace(".", "-")
        kpath = os.path.join(out_dir, f"{base}_kde_{safe}.csv")
        with open(kpath, "w") as fh:
            fh.write("grid,density\n")
            fh.write("\n".join(f"{g!r},{d!r}" for g, d in zip(grid, density)))
            fh.write("\n")
        print(f"wrote {kpath}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="spectral-cil",
        description="Class-incremental learning on 1-D spectra")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the experiment protocol")
    _add_override_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_grid = sub.add_parser("grid", help="run the CB sensitivity grid")
    _add_override_flags(p_grid)
    p_grid.set_defaults(func=cmd_grid)

    p_gen = sub.add_parser("gen-data", help="export synthetic spectra as CSV")
    _add_override_flags(p_gen)
    p_gen.add_argument("--out-csv", required=True, dest="out_csv",
                       help="destination CSV path")
    p_gen.add_argument("--header", action="store_true")
    p_gen.set_defaults(func=cmd_gen_data)

    p_an = sub.add_parser("analyze", help="weight stats of a checkpoint")
    p_an.add_argument("--checkpoint", required=True)
    p_an.add_argument("--out")
    p_an.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, OSError, ValueError) as exc:
        error = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(error), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
