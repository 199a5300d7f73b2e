"""
`histogram`: merge clearance event files into one fixed-width histogram.
"""
from pathlib import Path

import click

from commands.common import reports_errors
from config import Config
from utils.trace_io import histogram_from_files, write_histogram


def cmd_histogram(events_paths, bin_width: float, max_m: float, output_path=None) -> Path:
    frame = histogram_from_files(events_paths, bin_width, max_m)
    target = Path(output_path) if output_path else Path(Config.CLEARANCE_OUTPUT_DIR) / 'histogram.csv'
    return write_histogram(frame, target)


@click.command('histogram')
@click.argument('events_paths', nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--bin-width', type=click.FloatRange(min=0, min_open=True), default=0.05, show_default=True,
              help='Bin width in meters.')
@click.option('--max', 'max_m', type=click.FloatRange(min=0, min_open=True), default=4.0, show_default=True,
              help='Upper end of the histogram range in meters.')
@click.option('-o', '--output', 'output_path', default=None, help='Histogram CSV path.')
@reports_errors
def histogram_cmd(events_paths, bin_width, max_m, output_path):
    """Bin clearance events from one or more events CSV files."""
    path = cmd_histogram(events_paths, bin_width, max_m, output_path)
    click.echo(f"✅ Histogram of {len(events_paths)} file(s) written")
    click.echo(f"📁 {path}")
