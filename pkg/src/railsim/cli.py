"""Command line entry point: ``railsim run|validate|preset``."""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

from .experiment import OUTPUT_ENV, PRESETS, ConfigError, load_config, run_experiment, validate_config, write_preset
from .workload import WorkloadError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="railsim",
        description="Flow-level all-to-all experiments on rail-optimized fabrics.",
        epilog=f"Set {OUTPUT_ENV} to redirect result files to another directory.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config and write CSV + manifest")
    run.add_argument("config", help="path to a JSON experiment config")
    run.add_argument("--workers", type=int, default=None,
                     help="parallel worker processes (overrides the config)")

    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")

    pre = sub.add_parser("preset", help="write a ready-made scenario config")
    pre.add_argument("name", choices=sorted(PRESETS))
    pre.add_argument("--out", required=True, help="where to write the config JSON")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            resolved = validate_config(args.config)
            print("ok")
            print(json.dumps(resolved, indent=2))
        elif args.command == "preset":
            path = write_preset(args.name, args.out)
            print(f"wrote {path}")
        else:
            if args.workers is not None and args.workers < 1:
                print("error: --workers must be >= 1", file=sys.stderr)
                return 2
            summary = run_experiment(load_config(args.config), workers=args.workers)
            print(f"wrote {summary['rows']} rows to {summary['csv']} (sha256 {summary['sha256'][:16]})")
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 2
    except WorkloadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
