"""
`compare`: run scenarios with biasing as configured and with alpha = 0, and
write both traces, both event files and a summary per scenario.
"""
from pathlib import Path
from typing import Optional, Sequence, Tuple

import click

from commands.common import echo_timing, output_directory, reports_errors
from config import Config
from models import BiasingComparison, RunReport
from utils.closed_loop_sim import compare_biasing
from utils.scenario_loader import load_scenario
from utils.trace_io import write_events, write_summary, write_trace


def cmd_compare(scenario_path, output_dir: Optional[str] = None,
                overrides: Sequence[str] = ()) -> Tuple[RunReport, BiasingComparison]:
    scenario = load_scenario(scenario_path, overrides)
    comparison = compare_biasing(scenario)
    directory = output_directory(output_dir, scenario.name)
    paths = {
        'trace_unbiased': write_trace(comparison.unbiased, directory / 'trace_unbiased.csv'),
        'events_unbiased': write_events(comparison.unbiased_events, directory / 'events_unbiased.csv'),
        'summary': write_summary(comparison, directory / 'summary.yaml'),
    }
    report = RunReport(trace_path=str(write_trace(comparison.biased, directory / 'trace_biased.csv')),
                       events_path=str(write_events(comparison.biased_events, directory / 'events_biased.csv')),
                       timing=comparison.timing['biased'],
                       extra_paths={key: str(path) for key, path in paths.items()})
    return report, comparison


def _echo_comparison(comparison: BiasingComparison, report: RunReport):
    click.echo(f"\n✅ {comparison.biased.scenario_name}")
    if not comparison.biasing:
        click.echo("⚠️  alpha = 0: both columns come from the same unbiased run")
    for pair in comparison.pairs:
        gain = f"{pair.improvement_pct:+.1f}%" if pair.improvement_pct is not None else "n/a"
        click.echo(f"   - {pair.agent_id}: {pair.biased:.3f} m biased, {pair.unbiased:.3f} m unbiased ({gain})")
    if comparison.improvement_pct is None:
        click.echo("   Minimum clearance improvement: n/a")
    else:
        click.echo(f"   Minimum clearance improvement: {comparison.improvement_pct:+.1f}%")
    click.echo(f"   Max path difference: {comparison.path_delta_max:.3e} m")
    if not (comparison.biased.collision_free and comparison.unbiased.collision_free):
        click.echo("⚠️  A run reported footprint overlap with an agent")
    echo_timing("Biasing", comparison.timing['biased'])
    echo_timing("No biasing", comparison.timing['unbiased'])
    click.echo(f"📁 Summary: {report.extra_paths['summary']}")


@click.command('compare')
@click.argument('scenario_paths', nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('-o', '--output-dir', default=None,
              help='Output directory; with several scenarios one sub-directory per scenario is created.')
@click.option('--set', 'overrides', multiple=True, metavar='KEY=VALUE',
              help='Override applied to every scenario before the runs.')
@reports_errors
def compare_cmd(scenario_paths, output_dir, overrides):
    """Compare biased and alpha = 0 runs of one or more scenarios."""
    several = len(scenario_paths) > 1
    for scenario_path in scenario_paths:
        target = output_dir
        if several:
            target = str(Path(output_dir or Config.CLEARANCE_OUTPUT_DIR) / Path(scenario_path).stem)
        report, comparison = cmd_compare(scenario_path, target, overrides)
        _echo_comparison(comparison, report)
