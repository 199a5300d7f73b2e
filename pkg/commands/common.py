"""
Shared pieces of the command modules: exit codes, error reporting and output locations.
"""
import functools
import logging
from pathlib import Path

import click

from config import Config
from models import TimingStats
from utils.errors import (ClearanceMpcError, DataFileError, InvalidProblemError, OutputError, PathTooShortError,
                          ScenarioError)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
EXIT_FILESYSTEM = 4

VALIDATION_ERRORS = (ScenarioError, InvalidProblemError, PathTooShortError, DataFileError)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, OutputError):
        return EXIT_FILESYSTEM
    if isinstance(exc, VALIDATION_ERRORS):
        return EXIT_VALIDATION
    return EXIT_RUNTIME


def reports_errors(func):
    """Turn package errors into a console message and the documented exit code."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ClearanceMpcError as exc:
            click.echo(f"❌ {exc}", err=True)
            raise SystemExit(exit_code_for(exc)) from exc
        except OSError as exc:
            click.echo(f"❌ Filesystem error: {exc}", err=True)
            raise SystemExit(EXIT_FILESYSTEM) from exc
        except Exception as exc:
            logger.exception("Unexpected failure in %s", func.__name__)
            click.echo(f"❌ Runtime error: {exc}", err=True)
            raise SystemExit(EXIT_RUNTIME) from exc
    return wrapper


def output_directory(requested, scenario_name) -> Path:
    if requested:
        return Path(requested)
    return Path(Config.CLEARANCE_OUTPUT_DIR) / scenario_name


def echo_timing(label: str, stats: TimingStats):
    click.echo(f"⏱️  {label}: average {stats.average_ms:.2f} ms, maximum {stats.maximum_ms:.2f} ms "
               f"(p50 {stats.p50_ms:.2f}, p95 {stats.p95_ms:.2f}, {stats.samples} solves)")
