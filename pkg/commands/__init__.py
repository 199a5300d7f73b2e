"""
Command modules of the clearance MPC command-line interface
"""
from commands.bench_command import bench_cmd
from commands.compare_command import compare_cmd
from commands.histogram_command import histogram_cmd
from commands.run_command import run_cmd

__all__ = ['run_cmd', 'compare_cmd', 'histogram_cmd', 'bench_cmd']
