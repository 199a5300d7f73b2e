"""
`run`: simulate one scenario and write its trace and clearance events.
"""
import logging
from typing import Optional, Sequence

import click

from commands.common import echo_timing, output_directory, reports_errors
from models import RunReport, SolverOutcome
from utils.closed_loop_sim import clearance_events, run_scenario, warm_cycle_timing
from utils.scenario_loader import load_scenario
from utils.trace_io import write_events, write_trace

logger = logging.getLogger(__name__)


def cmd_run(scenario_path, output_dir: Optional[str] = None, overrides: Sequence[str] = ()) -> RunReport:
    scenario = load_scenario(scenario_path, overrides)
    trace = run_scenario(scenario)
    events = clearance_events(trace)
    directory = output_directory(output_dir, scenario.name)
    trace_path = write_trace(trace, directory / 'trace.csv')
    events_path = write_events(events, directory / 'events.csv')
    degraded = sum(cycle.outcome is not SolverOutcome.CONVERGED for cycle in trace.cycles)
    if degraded:
        logger.warning("%d cycles returned a non-converged iterate", degraded)
    return RunReport(trace_path=str(trace_path), events_path=str(events_path), timing=warm_cycle_timing(trace))


@click.command('run')
@click.argument('scenario_path', type=click.Path(exists=True, dir_okay=False))
@click.option('-o', '--output-dir', default=None, help='Directory for trace.csv and events.csv.')
@click.option('--set', 'overrides', multiple=True, metavar='KEY=VALUE',
              help='Override a scenario field by dotted path, e.g. weights.alpha=0.')
@reports_errors
def run_cmd(scenario_path, output_dir, overrides):
    """Run a closed-loop simulation of one scenario."""
    report = cmd_run(scenario_path, output_dir, overrides)
    click.echo(f"✅ Simulation finished: {scenario_path}")
    click.echo(f"📁 Trace:  {report.trace_path}")
    click.echo(f"📁 Events: {report.events_path}")
    echo_timing("Solve time", report.timing)
