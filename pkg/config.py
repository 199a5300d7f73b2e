import logging
import os

import click
from dotenv import load_dotenv

from models import SolverConfig

# Load environment variables from .env file
load_dotenv()


def _env_bool(name, default):
    return os.getenv(name, default).strip().lower() in ('1', 'true', 'yes', 'on')


class Config:
    # Solver defaults (scenario files may override any of them in a `solver` section)
    MPC_MAX_SQP_ITERATIONS = int(os.getenv('MPC_MAX_SQP_ITERATIONS', 20))
    MPC_KKT_TOLERANCE = float(os.getenv('MPC_KKT_TOLERANCE', 1e-6))
    MPC_MAX_QP_ITERATIONS = int(os.getenv('MPC_MAX_QP_ITERATIONS', 60))
    # 0 means unlimited
    MPC_TIME_BUDGET = float(os.getenv('MPC_TIME_BUDGET', 0.0))
    MPC_WARM_START = _env_bool('MPC_WARM_START', 'true')
    MPC_REGULARIZATION_EPSILON = float(os.getenv('MPC_REGULARIZATION_EPSILON', 1e-8))

    # Output
    CLEARANCE_OUTPUT_DIR = os.getenv('CLEARANCE_OUTPUT_DIR', 'output')

    # Logging
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'WARNING').upper()

    # Benchmarking
    BENCH_REPETITIONS = int(os.getenv('BENCH_REPETITIONS', 3))


def create_solver_config(**overrides) -> SolverConfig:
    """Build a validated SolverConfig from Config defaults and explicit overrides."""
    values = {
        'max_sqp_iterations': Config.MPC_MAX_SQP_ITERATIONS,
        'kkt_tolerance': Config.MPC_KKT_TOLERANCE,
        'max_qp_iterations': Config.MPC_MAX_QP_ITERATIONS,
        'time_budget': Config.MPC_TIME_BUDGET,
        'warm_start': Config.MPC_WARM_START,
        'regularization_epsilon': Config.MPC_REGULARIZATION_EPSILON,
    }
    unknown = set(overrides) - set(values)
    if unknown:
        raise ValueError(f"Unknown solver settings: {', '.join(sorted(unknown))}")
    values.update({key: value for key, value in overrides.items() if value is not None})
    return SolverConfig(**values)


def configure_logging(verbose=False):
    level = logging.DEBUG if verbose else getattr(logging, Config.LOG_LEVEL, logging.WARNING)
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    logging.getLogger().setLevel(level)
    return level


def print_config():
    """Print the active configuration (verbose mode)."""
    click.echo("\n⚙️  Active configuration:")
    for name in sorted(vars(Config)):
        if name.isupper():
            click.echo(f"   {name} = {getattr(Config, name)}")
