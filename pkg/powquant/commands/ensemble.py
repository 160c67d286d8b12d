"""
ENSEMBLE-EVAL COMMAND - Probability-averaged ensembles

Either evaluates saved member models (--model repeated) or trains --parallel
float members (quantized at --bits when given) and evaluates their average.
"""

import click
import numpy as np

from powquant.commands.common import common_options, echo_json, first_seed, load_config, run_log
from powquant.services.ensemble_sa import Ensemble, ensemble_predict, make_inq_quantizer, pairwise_member_distance, \
    train_ensemble
from powquant.services.experiments import evaluate_model, inq_schedule, load_dataset, load_model, train_float
from powquant.services.metrics import PRIMARY_METRIC, evaluate_task
from powquant.utils import handle_cli_errors


@click.command("ensemble-eval")
@common_options
@click.option("--model", "model_paths", type=click.Path(exists=True, dir_okay=False), multiple=True)
@handle_cli_errors
def ensemble_eval(config_path, seed, out_dir, bits, parallel, model_paths):
    """Evaluate a K-member ensemble against its members."""
    config = load_config(config_path, seed, out_dir, None, parallel)
    seed = first_seed(config)
    with run_log(config.output.out_dir):
        splits = load_dataset(config, seed)
        if model_paths:
            members = [load_model(config, path, seed)[0] for path in model_paths]
            ensemble = Ensemble(members=members)
        else:
            k = config.sweep.parallel[0]
            quantizer = None
            if bits is not None:
                quantizer = make_inq_quantizer((splits.train.X, splits.train.Y), inq_schedule(config.schedule),
                                               config.optimizer, config.schedule.strategy,
                                               config.schedule.max_level_override)
            ensemble = train_ensemble(lambda s: train_float(config, splits.train, s), k,
                                      seeds=[seed * 100 + j for j in range(k)], quantize_bits=bits,
                                      quantizer=quantizer, workers=config.sweep.workers)

        primary = PRIMARY_METRIC[config.task]
        singles = [evaluate_model(config, m, splits.test)[primary] for m in ensemble.members]
        metrics = evaluate_task(config.task, ensemble_predict(ensemble, splits.test.X), splits.test.Y)
    echo_json({"parallel": ensemble.size, "ensemble": metrics,
               f"member_mean_{primary}": float(np.mean(singles)), "members": singles,
               "member_distance": pairwise_member_distance(ensemble)})
