# commands.py
# LeaSE Engine - Command Handlers
# Created by Digital COE Gen AI Team

import argparse
from functools import wraps
from typing import Callable

from loguru import logger

from leasenas.config import parse_config, settings, with_overrides
from leasenas.exceptions import ConfigError, LeaseError
from leasenas.models.schemas import RunConfig
from leasenas.services import harness
from leasenas.services.gradcheck import SUITES, run_gradcheck


EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2


def handles_errors(command: Callable[[argparse.Namespace], int]) -> Callable[[argparse.Namespace], int]:
    """Map engine exceptions to process exit codes: 1 for config/data, 2 for numeric aborts."""

    @wraps(command)
    def wrapper(args: argparse.Namespace) -> int:
        try:
            return command(args)
        except LeaseError as e:
            logger.error(f"{command.__name__}: {e}")
            return e.exit_code
    return wrapper


def _parse_gammas(text):
    if text is None:
        return None
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse gamma list {text!r}", field="--gamma") from None


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Config file (or defaults) with CLI overrides applied and re-validated."""
    config = parse_config(args.config) if getattr(args, "config", None) else RunConfig()
    out = getattr(args, "out", None)
    if out is None and config.run.out_dir == RunConfig().run.out_dir:
        out = settings.OUTPUT_ROOT / "default"
    workers = getattr(args, "workers", None)
    if workers is None and settings.WORKERS != 1:
        workers = settings.WORKERS
    return with_overrides(
        config,
        **{
            "run.seed": getattr(args, "seed", None),
            "run.mode": getattr(args, "mode", None),
            "run.out_dir": out,
            "run.workers": workers,
            "run.gammas": _parse_gammas(getattr(args, "gamma", None)),
        },
    )


@handles_errors
def search_command(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    result = harness.run_search(cfg)
    logger.info(f"Search artifacts in {cfg.run.out_dir}: {result.genotype_path.name}, {result.metrics_path.name}")
    return EXIT_OK


@handles_errors
def eval_command(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    harness.run_eval(cfg, args.genotype)
    return EXIT_OK


@handles_errors
def sweep_command(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    rows = harness.gamma_sweep(cfg)
    logger.info(f"Sweep finished: {len(rows)} rows in {cfg.run.out_dir / harness.SWEEP_FILE}")
    return EXIT_OK


@handles_errors
def baseline_command(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    harness.run_baseline(cfg, args.genotype, runs=args.runs)
    return EXIT_OK


@handles_errors
def gradcheck_command(args: argparse.Namespace) -> int:
    suites = args.suite or list(SUITES)
    results = run_gradcheck(seeds=args.seeds, suites=suites)
    return EXIT_OK if all(r.status == "PASS" for r in results) else EXIT_NUMERIC
