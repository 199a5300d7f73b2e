import click

from commands import bench_cmd, compare_cmd, histogram_cmd, run_cmd
from config import configure_logging, print_config


@click.group(help="Clearance-maximizing MPC steering controller: closed-loop scenarios and benchmarks.")
@click.option('-v', '--verbose', is_flag=True, help='Debug logging and configuration dump.')
def cli(verbose):
    configure_logging(verbose)
    if verbose:
        print_config()


# Register commands
cli.add_command(run_cmd)
cli.add_command(compare_cmd)
cli.add_command(histogram_cmd)
cli.add_command(bench_cmd)


if __name__ == '__main__':
    cli()
