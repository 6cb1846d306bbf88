"""Command-line entry point: ``frboost <stage> --config PATH [--seed N] [--preset desk|paper] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from frboost.checkpoint import NumericalAbort
from frboost.evalbench.protocols import ProtocolError
from frboost.runner.config import PRESETS, ConfigError, ExperimentConfig
from frboost.runner.stages import STAGE_NAMES, LockError, PrerequisiteError, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_NUMERIC = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="frboost", description="Self-supervised face recognition pretraining pipeline.")
    sub = p.add_subparsers(dest="command", required=True, metavar="stage")
    for name in STAGE_NAMES:
        s = sub.add_parser(name, help=f"run the {name} stage")
        s.add_argument("--config", required=True, help="experiment JSON file")
        s.add_argument("--seed", type=int, help="override the master seed")
        s.add_argument("--preset", choices=PRESETS, help="defaults the config file is overlaid on")
        s.add_argument("--out", help="experiment directory (overrides out_dir)")
    s = sub.add_parser("show-config", help="print a complete config for a preset")
    s.add_argument("--preset", choices=PRESETS, default="desk")
    s = sub.add_parser("compare", help="delta table between two report JSON files")
    s.add_argument("report_a")
    s.add_argument("report_b")
    s.add_argument("--metric", default="accuracy")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    if args.command == "show-config":
        print(json.dumps(ExperimentConfig.preset(args.preset).to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    if args.command == "compare":
        from frboost.runner.compare import compare_runs

        try:
            print(compare_runs(args.report_a, args.report_b).format(args.metric))
        except (ValueError, OSError, KeyError) as err:
            print(f"error: {err}", file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_OK
    try:
        cfg = ExperimentConfig.load(args.config, args.preset)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out_dir = args.out
        cfg.validate()
        for path in run_stage(args.command, cfg):
            print(path)
    except (ConfigError, LockError, ProtocolError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except PrerequisiteError as err:
        print(f"prerequisite error: {err}", file=sys.stderr)
        return EXIT_PREREQ
    except NumericalAbort as err:
        print(f"numerical abort: {err} (diagnostic checkpoint: {err.checkpoint_path})", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
