"""
TRAIN COMMAND - Float baseline training

Trains the recipe model from scratch on the generated (or IDX) training split,
evaluates it on the test split and writes an all-float32 SQW file.
"""

import click

from powquant.commands.common import common_options, echo_json, first_seed, load_config, run_log
from powquant.services import packstore
from powquant.services.experiments import dump_json, evaluate_model, load_dataset, train_float
from powquant.utils import get_logger, handle_cli_errors

logger = get_logger(__name__)


@click.command("train")
@common_options
@handle_cli_errors
def train(config_path, seed, out_dir, bits, parallel):
    """Train a float model and save it as <out>/model.sqw."""
    config = load_config(config_path, seed, out_dir, bits, parallel)
    seed = first_seed(config)
    with run_log(config.output.out_dir) as out:
        splits = load_dataset(config, seed)
        model = train_float(config, splits.train, seed)
        metrics = evaluate_model(config, model, splits.test)
        packstore.write_sqw(out / "model.sqw", model)
        dump_json({"seed": seed, "parameters": model.parameter_count(), "metrics": metrics}, out / "metrics.json")
    echo_json(metrics)
