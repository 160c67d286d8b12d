"""
BENCH COMMAND - Multiply vs shift-add inference timing
"""

import click

from powquant.commands.common import common_options, echo_json, first_seed, load_config
from powquant.services import packstore
from powquant.services.experiments import load_dataset, load_model
from powquant.utils import handle_cli_errors


@click.command("bench")
@common_options
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--batch-size", type=int, default=64, show_default=True)
@click.option("--repetitions", type=int, default=5, show_default=True)
@handle_cli_errors
def bench(config_path, seed, out_dir, bits, parallel, model_path, batch_size, repetitions):
    """Time both kernels on a test batch (report only)."""
    config = load_config(config_path, seed, out_dir, bits, parallel)
    seed = first_seed(config)
    model, packed = load_model(config, model_path, seed)
    batch = load_dataset(config, seed).test.X[:batch_size]
    echo_json(packstore.bench(packed, model, batch, repetitions).model_dump())
