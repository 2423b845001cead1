# main.py
# LeaSE Engine - Command-Line Entry Point
# Created by Digital COE Gen AI Team

import argparse
import sys
from typing import List, Optional

from loguru import logger

from leasenas import __version__
from leasenas.api import commands
from leasenas.config import configure_logging, settings
from leasenas.models.schemas import Mode
from leasenas.services.gradcheck import SUITES


def _add_run_options(parser: argparse.ArgumentParser, out: bool = True):
    parser.add_argument("--config", help="INI run configuration (defaults when omitted)")
    parser.add_argument("--seed", type=int, help="override run.seed")
    parser.add_argument(
        "--mode",
        choices=[m.value for m in Mode] + ["audience-only"],
        help="override run.mode",
    )
    if out:
        parser.add_argument("--out", help="override run.out_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="leasenas",
        description="Architecture search by learning from self-explanation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help=f"loguru level (default {settings.LOG_LEVEL}, env LEASE_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    search = sub.add_parser("search", help="run the search phase")
    _add_run_options(search)
    search.set_defaults(handler=commands.search_command)

    evaluate = sub.add_parser("eval", help="retrain a genotype from scratch and score the test split")
    _add_run_options(evaluate)
    evaluate.add_argument("--genotype", required=True, help="genotype JSON written by search")
    evaluate.set_defaults(handler=commands.eval_command)

    sweep = sub.add_parser("sweep", help="search + eval for each gamma")
    _add_run_options(sweep)
    sweep.add_argument("--gamma", help="comma-separated gamma values, e.g. 0.1,0.5,1,2")
    sweep.add_argument("--workers", type=int, help="parallel runs")
    sweep.set_defaults(handler=commands.sweep_command)

    baseline = sub.add_parser("baseline", help="searched genotype vs. uniformly random genotypes")
    _add_run_options(baseline)
    baseline.add_argument("--genotype", help="genotype to compare (searches first when omitted)")
    baseline.add_argument("--runs", type=int, help="override run.baseline_runs")
    baseline.set_defaults(handler=commands.baseline_command)

    gradcheck = sub.add_parser("gradcheck", help="run the gradient and hypergradient oracle suites")
    gradcheck.add_argument("--seeds", type=int, default=20)
    gradcheck.add_argument("--suite", action="append", choices=list(SUITES))
    gradcheck.set_defaults(handler=commands.gradcheck_command)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    logger.debug(f"{settings.APP_NAME} {__version__}: {args.command}")
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
