"""
Main entry point for the shred-sensing command line.
"""

import argparse
import logging
import sys
from typing import List, Optional

from dotenv import load_dotenv

from resources import APP_NAME, APP_VERSION, DEFAULT_CONFIG_PATH
from utils.error_handler import ShredError
from utils.logger import logger, set_console_level

COMMANDS = ("generate", "train", "eval", "ensemble", "sweep", "route-table", "baselines", "population")


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per experiment stage."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=str(DEFAULT_CONFIG_PATH), help="experiment config (JSON)")
    common.add_argument("--out", help="output root (default: $SHRED_OUT or ./runs)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for independent cells")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--verbose", action="store_true", help="debug output on the console")
    common.add_argument("--figures", action="store_true", help="also write PNG figures")

    parser = argparse.ArgumentParser(prog=APP_NAME, description="Mobile-sensor shallow recurrent decoder experiments")
    parser.add_argument("--version", action="version", version=f"{APP_NAME} {APP_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="generate the configured field")
    sub.add_parser("train", parents=[common], help="train one reconstructor")
    evaluate = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    evaluate.add_argument("--checkpoint", help="checkpoint directory (default: <out>/train/checkpoint)")
    evaluate.add_argument("--split", choices=("train", "val", "test"), default="test")
    ensemble = sub.add_parser("ensemble", parents=[common], help="train mobile/immobile ensembles")
    ensemble.add_argument("--count", type=int, help="models per ensemble (overrides ensemble.count)")
    ensemble.add_argument("--kind", choices=("mobile", "immobile"), action="append",
                          help="ensemble kind; repeat for both (overrides ensemble.kinds)")
    sweep = sub.add_parser("sweep", parents=[common], help="hidden-width sweep")
    sweep.add_argument("--widths", type=int, nargs="+", help="hidden widths (overrides sweep.widths)")
    sub.add_parser("route-table", parents=[common], help="route combination x partition table")
    sub.add_parser("baselines", parents=[common], help="SHRED vs SDN vs linear comparison")
    sub.add_parser("population", parents=[common], help="gait cohort hold-out evaluation")
    return parser


def run(args: argparse.Namespace):
    """Dispatch parsed arguments to the command service."""
    # Imported here so argument errors and --version stay fast
    from config import ExperimentConfig
    from services import command_service

    if args.jobs < 1:
        from utils.error_handler import ConfigError
        raise ConfigError("--jobs", f"must be >= 1, got {args.jobs}")
    config = ExperimentConfig.load(args.config).with_overrides(seed=args.seed, output_dir=args.out)
    logger.info(f"{args.command}: seed {config.seed}, output {config.output_dir}")
    if args.command == "generate":
        return command_service.cmd_generate(config)
    if args.command == "train":
        return command_service.cmd_train(config)
    if args.command == "eval":
        return command_service.cmd_eval(config, args.checkpoint, args.split, args.figures)
    if args.command == "ensemble":
        return command_service.cmd_ensemble(config, args.count, args.kind, args.jobs, args.figures)
    if args.command == "sweep":
        return command_service.cmd_sweep(config, args.widths, args.jobs, args.figures)
    if args.command == "route-table":
        return command_service.cmd_route_table(config, args.jobs)
    if args.command == "baselines":
        return command_service.cmd_baselines(config, args.jobs)
    return command_service.cmd_population(config, args.jobs)


def main(argv: Optional[List[str]] = None) -> int:
    """
    Command-line entry point.

    Returns:
        int: 0 on success, 2 config error, 3 data error, 4 numeric failure
    """
    load_dotenv()
    args = build_parser().parse_args(argv)
    if args.verbose:
        set_console_level(logging.DEBUG)
    try:
        run(args)
    except ShredError as e:
        logger.error(f"{type(e).__name__}: {str(e)}")
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
