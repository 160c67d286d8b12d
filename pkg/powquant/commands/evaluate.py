"""
EVAL COMMAND - Test-split metrics of a saved model

The model is rebuilt from the config recipe; --kernel picks the product used
for every weight (BLAS, explicit multiplies or shift-add on packed codes).
"""

import click

from powquant.commands.common import common_options, echo_json, first_seed, load_config
from powquant.services import packstore
from powquant.services.experiments import evaluate_model, load_dataset, load_model
from powquant.services.nncore import multiply_kernel
from powquant.utils import handle_cli_errors


@click.command("eval")
@common_options
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--kernel", type=click.Choice(["blas", "multiply", "shiftadd"]), default="blas", show_default=True)
@handle_cli_errors
def evaluate(config_path, seed, out_dir, bits, parallel, model_path, kernel):
    """Evaluate an SQW model on the test split."""
    config = load_config(config_path, seed, out_dir, bits, parallel)
    seed = first_seed(config)
    model, packed = load_model(config, model_path, seed)
    matmul = None
    if kernel == "shiftadd":
        packstore.require_quantized(packed, model)
        matmul = packstore.shiftadd_kernel(packed)
    elif kernel == "multiply":
        matmul = multiply_kernel
    echo_json(evaluate_model(config, model, load_dataset(config, seed).test, kernel=matmul))
