"""Command-line entry point.

    pruneshare run <config.yaml>
    pruneshare sweep <config.yaml> --axis actor|critic --ratios 0.1 0.5 0.9
    pruneshare report <results-dir>
    pruneshare dump-features <checkpoint-dir> <observations.json> [--out f.csv]

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigError, TrainingError, UsageError
from .harness import (ExperimentConfig, report_resources, run_experiment,
                      sweep_pruning_ratio, write_csv)
from .sharednet import SharedAgentNetwork, load_meta


def _cmd_run(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    records = run_experiment(config)
    for rec in records:
        print(f"seed {rec.seed}: final return {rec.final_return:.4f} "
              f"({rec.run_dir})")
    return 0


def _cmd_sweep(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    table = sweep_pruning_ratio(config, args.axis, args.ratios)
    for row in table:
        print(f"ratio {row['ratio']:g}: mean final return "
              f"{row['mean_final_return']:.4f} +- {row['std_final_return']:.4f} "
              f"({row['n_seeds']} seeds)")
    return 0


def _cmd_report(args) -> int:
    rows = report_resources(args.directory)
    width = max(len(r["mode"]) for r in rows)
    for r in rows:
        print(f"{r['mode']:<{width}}  params {r['parameter_count']:>8}  "
              f"relative wall-clock {r['relative_wall_clock']:.3f}")
    return 0


def _cmd_dump_features(args) -> int:
    net = SharedAgentNetwork.load(args.checkpoint)
    meta = load_meta(args.checkpoint)
    with open(args.obs_file) as f:
        payload = json.load(f)
    observations = payload["observations"] if isinstance(payload, dict) else payload
    dump = net.dump_hidden_features(observations)
    out = args.out or "features.csv"
    provenance = {"config_hash": meta.get("config_hash", "unknown"),
                  "seed": meta.get("seed", "unknown")}
    run_id = meta.get("run_id", "unknown")
    step = meta.get("step", 0)
    rows = [[run_id, step, agent, layer, neuron, value, obs_id]
            for agent, layer, neuron, value, obs_id in dump.rows()]
    write_csv(out, provenance,
              ["run_id", "step", "agent", "layer", "neuron", "value",
               "observation"], rows)
    print(f"wrote {len(rows)} feature rows to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pruneshare",
        description="Structured-pruning parameter sharing experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run every seed of an experiment config")
    p_run.add_argument("config")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep",
                             help="sweep the last hidden-layer pruning ratio")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--axis", choices=("actor", "critic"), required=True)
    p_sweep.add_argument("--ratios", nargs="+", type=float, required=True)
    p_sweep.set_defaults(func=_cmd_sweep)

    p_report = sub.add_parser("report",
                              help="aggregate parameter counts and timings")
    p_report.add_argument("directory")
    p_report.set_defaults(func=_cmd_report)

    p_dump = sub.add_parser("dump-features",
                            help="dump hidden features for observations")
    p_dump.add_argument("checkpoint")
    p_dump.add_argument("obs_file")
    p_dump.add_argument("--out", default=None)
    p_dump.set_defaults(func=_cmd_dump_features)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
