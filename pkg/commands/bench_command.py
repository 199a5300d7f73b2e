"""
`bench`: solve-time statistics for the biased and alpha = 0 configurations of a scenario.
"""
import logging
from typing import List, Optional, Sequence

import click
import pandas as pd

from commands.common import reports_errors
from config import Config
from models import BenchReport, Scenario, TimingStats
from utils.closed_loop_sim import ClosedLoopSimulation, initial_state
from utils.errors import OutputError
from utils.mpc_problem import MpcTranscription
from utils.scenario_loader import load_scenario

logger = logging.getLogger(__name__)

BENCH_COLUMNS = ('configuration', 'alpha', 'average_ms', 'maximum_ms', 'p50_ms', 'p95_ms', 'run_average_max_ms',
                 'samples', 'n_variables', 'n_equalities', 'n_inequalities', 'n_safety_variables')


def bench_configuration(scenario: Scenario, label: str, repetitions: int) -> BenchReport:
    samples: List[float] = []
    run_averages: List[float] = []
    simulation = None
    for repetition in range(repetitions):
        simulation = ClosedLoopSimulation(scenario)
        trace = simulation.run()
        # the first cycle is a cold start
        warm = trace.solve_ms[1:] if len(trace) > 1 else trace.solve_ms
        samples.extend(warm.tolist())
        run_averages.append(float(warm.mean()) if len(warm) else 0.0)
        logger.debug("%s repetition %d: %.2f ms average", label, repetition + 1, run_averages[-1])

    start = initial_state(scenario, simulation.path)
    problem = simulation.build_problem(start, 0.0, simulation.path.project(start.x, start.y))
    transcription = MpcTranscription(problem)
    return BenchReport(label=label, alpha=scenario.weights.alpha, timing=TimingStats.from_samples(samples),
                       run_averages_ms=run_averages, n_variables=transcription.n_variables,
                       n_equalities=transcription.n_equalities, n_inequalities=transcription.n_inequalities,
                       n_safety_variables=transcription.n_safety_variables)


def cmd_bench(scenario_path, repetitions: Optional[int] = None, overrides: Sequence[str] = ()) -> List[BenchReport]:
    scenario = load_scenario(scenario_path, overrides)
    repetitions = repetitions or Config.BENCH_REPETITIONS
    reports = []
    if scenario.weights.alpha > 0:
        reports.append(bench_configuration(scenario, 'biasing', repetitions))
    reports.append(bench_configuration(scenario.with_alpha(0.0), 'no_biasing', repetitions))
    return reports


def bench_frame(reports: Sequence[BenchReport]) -> pd.DataFrame:
    rows = [(report.label, report.alpha, report.timing.average_ms, report.timing.maximum_ms, report.timing.p50_ms,
             report.timing.p95_ms, report.run_average_max_ms, report.timing.samples, report.n_variables,
             report.n_equalities, report.n_inequalities, report.n_safety_variables) for report in reports]
    return pd.DataFrame(rows, columns=list(BENCH_COLUMNS))


@click.command('bench')
@click.argument('scenario_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--reps', 'repetitions', type=click.IntRange(min=1), default=None,
              help='Repetitions per configuration (default: BENCH_REPETITIONS).')
@click.option('--set', 'overrides', multiple=True, metavar='KEY=VALUE', help='Scenario override.')
@click.option('-o', '--output', 'output_path', default=None, help='Optional CSV file for the timing table.')
@reports_errors
def bench_cmd(scenario_path, repetitions, overrides, output_path):
    """Benchmark warm-started solve times with and without biasing."""
    reports = cmd_bench(scenario_path, repetitions, overrides)
    click.echo(f"\n⏱️  Solve times for {scenario_path}")
    for report in reports:
        timing = report.timing
        click.echo(f"   - {report.label}: average {timing.average_ms:.2f} ms, maximum {timing.maximum_ms:.2f} ms, "
                   f"p50 {timing.p50_ms:.2f} ms, p95 {timing.p95_ms:.2f} ms over {timing.samples} solves")
        click.echo(f"     variables {report.n_variables} (safety {report.n_safety_variables}), "
                   f"equalities {report.n_equalities}, inequalities {report.n_inequalities}")
    if output_path:
        try:
            bench_frame(reports).to_csv(output_path, index=False, float_format='%.10g', lineterminator='\n')
        except OSError as exc:
            raise OutputError(f"Cannot write {output_path}: {exc}") from exc
        click.echo(f"📁 {output_path}")
