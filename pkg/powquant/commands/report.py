"""
REPORT + RUN COMMANDS - Experiment recipes and their summaries

run executes the config's recipe (all seeds) and writes CSV tables, SQW files
and run.jsonl; report prints the mean / best rows of recipe CSVs or, with
--summary, the aggregate of the results store.
"""

import click

from powquant.commands.common import common_options, echo_json, load_config
from powquant.db import get_session, init_db
from powquant.services.experiments import run_experiment
from powquant.services.report import compute_report, render, summarize_csv
from powquant.utils import handle_cli_errors


@click.command("run")
@common_options
@click.option("--recipe", default=None, help="Recipe (replaces sweep.recipe).")
@handle_cli_errors
def run(config_path, seed, out_dir, bits, parallel, recipe):
    """Run an experiment recipe end to end."""
    config = load_config(config_path, seed, out_dir, bits, parallel, **{"sweep.recipe": recipe})
    result = run_experiment(config)
    echo_json({"out_dir": str(result.out_dir), "csv": [str(p) for p in result.csv_files],
               "models": len(result.sqw_files), "run_id": result.run_id})


@click.command("report")
@click.argument("csv_paths", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@click.option("--best", is_flag=True, help="Show best rows instead of means.")
@click.option("--summary", is_flag=True, help="Aggregate the results store instead of CSV files.")
@click.option("--recipe", default=None, help="Filter the store summary by recipe.")
@handle_cli_errors
def report(csv_paths, best, summary, recipe):
    """Summarize experiment outputs."""
    if summary:
        init_db()
        with get_session() as db:
            echo_json(compute_report(db, recipe))
        return
    if not csv_paths:
        raise click.UsageError("give CSV files or --summary")
    for path in csv_paths:
        click.echo(f"== {path}")
        click.echo(render(summarize_csv(path, "best" if best else "mean")))
