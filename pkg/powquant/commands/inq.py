"""
INQ COMMAND - Incremental quantization of a float model

Loads a float SQW model (or trains one), runs the accumulated-fraction
schedule at --bits and writes the packed model, its INQ log and test metrics.
"""

import click

from powquant.commands.common import common_options, echo_json, first_bits, first_seed, load_config, run_log
from powquant.services import packstore
from powquant.services.experiments import dump_json, evaluate_model, inq_schedule, load_dataset, load_model, \
    train_float
from powquant.services.inq import inq_train
from powquant.utils import handle_cli_errors


@click.command("inq")
@common_options
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Float SQW model to quantize (trained from scratch when omitted).")
@click.option("--strategy", type=click.Choice(["magnitude", "random"]), default=None,
              help="Partition strategy (replaces schedule.strategy).")
@handle_cli_errors
def inq(config_path, seed, out_dir, bits, parallel, model_path, strategy):
    """Quantize a model to power-of-two weights; writes <out>/model-b<bits>.sqw."""
    config = load_config(config_path, seed, out_dir, bits, parallel, **{"schedule.strategy": strategy})
    seed, bits = first_seed(config), first_bits(config)
    with run_log(config.output.out_dir) as out:
        splits = load_dataset(config, seed)
        if model_path:
            model, _ = load_model(config, model_path, seed)
        else:
            model = train_float(config, splits.train, seed)
        model, state, log = inq_train(
            model, (splits.train.X, splits.train.Y), inq_schedule(config.schedule), bits, config.optimizer,
            strategy=config.schedule.strategy, max_level_override=config.schedule.max_level_override, seed=seed,
        )
        metrics = evaluate_model(config, model, splits.test)
        report = packstore.memory_report(packstore.pack_tensors(model, state))
        metrics["memory_ratio"] = round(report.reduction_ratio, 4)
        packstore.write_sqw(out / f"model-b{bits}.sqw", model, state)
        dump_json(log.model_dump(), out / f"inq-b{bits}.json")
        dump_json({"seed": seed, "bits": bits, "metrics": metrics}, out / f"metrics-b{bits}.json")
    echo_json(metrics)
