#!/usr/bin/env python3
"""
Command-line interface for densityfed experiments
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from .config import ExperimentConfig, RuntimeConfig, dump_experiment_config
from .exceptions import DensityFedError
from .harness import (
    cmd_aggregate, cmd_collaborate, cmd_evaluate, cmd_generate, cmd_replay,
    cmd_train, load_config
)
from .models import Regime
from .utils import setup_logging

EPILOG = """
Examples:
  # Generate the default phantom institutions
  densityfed generate --out runs/seed7

  # Train every regime on them
  densityfed train --config runs/seed7/experiment.cfg --regime centralized-A
  densityfed train --config runs/seed7/experiment.cfg --regime centralized-B
  densityfed train --config runs/seed7/experiment.cfg --regime centralized-pooled
  densityfed train --config runs/seed7/experiment.cfg --regime federated

  # Compare them on the held-out test data
  densityfed evaluate --config runs/seed7/experiment.cfg

  # Recompute the recorded federation offline
  densityfed replay runs/seed7/models/federated/session.mfls
"""


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Experiment configuration file (key=value)")
    common.add_argument("--seed", type=int, help="Override the experiment seed")
    common.add_argument("--regime", choices=[r.value for r in Regime], help="Training regime")
    common.add_argument("--out", type=Path, help="Experiment output directory")
    common.add_argument("--force", action="store_true", help="Write into non-empty directories and replace files")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Log level")
    common.add_argument("--verbose", "-v", action="store_true", help="Print tracebacks on failure")

    parser = argparse.ArgumentParser(
        prog="densityfed",
        description="densityfed - federated breast-density segmentation on phantom mammograms",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EPILOG,
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands")
    subparsers.add_parser("generate", parents=[common], help="Generate phantom institutions and test splits")
    subparsers.add_parser("train", parents=[common], help="Train one regime")
    subparsers.add_parser("evaluate", parents=[common], help="Evaluate trained regimes and write reports")

    replay_parser = subparsers.add_parser("replay", parents=[common], help="Replay a recorded federation session")
    replay_parser.add_argument("session", type=Path, help="Session file written by a federated run")

    subparsers.add_parser("aggregate", parents=[common], help="Serve a multi-host federation")
    collaborate_parser = subparsers.add_parser("collaborate", parents=[common],
                                               help="Join a multi-host federation as one institution")
    collaborate_parser.add_argument("--institution", required=True, help="Institution this host holds")

    subparsers.add_parser("show-config", parents=[common], help="Print the effective configuration")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file (or defaults) with command-line overrides"""
    config = load_config(args.config)
    return config.with_overrides(
        seed=args.seed,
        regime=args.regime,
        output_dir=args.out,
    )


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point"""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return 1

    try:
        runtime = RuntimeConfig.from_env()
        if args.log_level:
            runtime.log_level = args.log_level
        runtime.validate()
        setup_logging(runtime.log_level)

        if args.command == "replay":
            result, replay = cmd_replay(args.session)
            print(json.dumps(result.to_dict(), indent=2))
            return 0 if replay.matches else 1

        config = resolve_config(args)
        if args.command == "show-config":
            print(dump_experiment_config(config), end="")
            return 0
        if args.command == "collaborate":
            return cmd_collaborate(config, args.institution, runtime)

        if args.command == "generate":
            result = cmd_generate(config, force=args.force)
        elif args.command == "train":
            result = cmd_train(config, runtime, force=args.force)
        elif args.command == "evaluate":
            result = cmd_evaluate(config, runtime, force=args.force)
        elif args.command == "aggregate":
            result = cmd_aggregate(config, runtime, force=args.force)
        else:
            parser.print_help()
            return 1

        print(json.dumps(result.to_dict(), indent=2))
        return 0

    except KeyboardInterrupt:
        print("\nInterrupted by user", file=sys.stderr)
        return 130

    except DensityFedError as e:
        print(json.dumps(e.to_error_response().to_dict(), indent=2, default=str))
        print(f"Error: {e.message}", file=sys.stderr)
        for suggestion in e.suggestions:
            print(f"  - {suggestion}", file=sys.stderr)
        if args.verbose:
            import traceback
            traceback.print_exc()
        return 2

    except Exception as e:
        print(f"Error: {str(e)}", file=sys.stderr)
        if args.verbose:
            import traceback
            traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
