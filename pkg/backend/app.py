"""Command-line entry point: sglmm simulate|fit|predict|compare|sensitivity."""
import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

from . import __version__
from .services.experiment_runner import (cmd_compare, cmd_fit, cmd_predict, cmd_sensitivity, cmd_simulate,
                                         registry_from_env)
from .services.run_config import COMMANDS, METHODS, RunConfig
from .sglmm_core.exceptions import SglmmError

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
EXIT_IO = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sglmm", description="Fit basis-expanded spatial GLMMs by SIVI, MH or HMC.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", default=None, help="output directory (overrides output_dir)")
        p.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
        if command == "fit":
            p.add_argument("--method", required=True, choices=METHODS)
    return parser


def _configure_logging(level: Optional[str]) -> None:
    level = (level or os.getenv('SGLMM_LOG_LEVEL') or 'INFO').upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT, force=True)


def run(args: argparse.Namespace) -> dict:
    config = RunConfig.load(args.config, args.command, out_dir=args.out)
    registry = registry_from_env()
    if args.command == "simulate":
        return cmd_simulate(config, registry)
    if args.command == "fit":
        return cmd_fit(config, args.method, registry)
    if args.command == "predict":
        return cmd_predict(config, registry)
    if args.command == "compare":
        return cmd_compare(config, registry)
    return cmd_sensitivity(config, registry)


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    _configure_logging(args.log_level)
    try:
        result = run(args)
    except SglmmError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_IO
    except Exception as e:
        logger.error(f"{args.command} failed unexpectedly: {e}", exc_info=True)
        return 1
    logger.info(f"{args.command} finished: output in {result.get('output_dir')}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
