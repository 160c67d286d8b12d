"""
MAIN ENTRY POINT - Command-line application

This is the entry point for the PowQuant toolkit.
It sets up:
1. The click command group
2. Registration of every subcommand (train, inq, eval, ensemble-eval,
   suggest, pack, unpack, bench, report, run)
3. --log-level override on top of POWQUANT_LOG_LEVEL

Machine-readable results go to stdout; JSON logs go to stderr and to
<out>/run.jsonl for commands that write outputs.
"""

import click

from powquant import config
from powquant.commands.bench import bench
from powquant.commands.ensemble import ensemble_eval
from powquant.commands.evaluate import evaluate
from powquant.commands.inq import inq
from powquant.commands.pack import pack, unpack
from powquant.commands.report import report, run
from powquant.commands.suggest import suggest
from powquant.commands.train import train
from powquant.utils import setup_logging


@click.group()
@click.version_option("0.1.0", prog_name="powquant")
@click.option("--log-level", default=None, help="Override POWQUANT_LOG_LEVEL.")
def cli(log_level):
    """PowQuant: incremental power-of-two quantization toolkit."""
    setup_logging((log_level or config.LOG_LEVEL).upper())


# STEP 1: Register commands
for command in (train, inq, evaluate, ensemble_eval, suggest, pack, unpack, bench, report, run):
    cli.add_command(command)


if __name__ == "__main__":
    cli()
