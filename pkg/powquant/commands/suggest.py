"""
SUGGEST COMMAND - Suggestive annotation over the training split

Splits the training set into a labeled seed set and an unlabeled pool, runs
the suggestion loop (suggestive ensemble quantized at --bits when given) and
writes the suggested indices.
"""

import click

from powquant.commands.common import common_options, echo_json, first_seed, load_config, run_log
from powquant.services.experiments import SeedContext, dump_json, load_dataset, seed_and_pool, suggestion_trainer
from powquant.services.ensemble_sa import suggest_training_set
from powquant.utils import handle_cli_errors


@click.command("suggest")
@common_options
@handle_cli_errors
def suggest(config_path, seed, out_dir, bits, parallel):
    """Suggest training samples; writes <out>/suggested.json."""
    config = load_config(config_path, seed, out_dir, None, parallel,
                         **{"suggestion.quantize_suggestors": bits})
    seed = first_seed(config)
    with run_log(config.output.out_dir) as out:
        ctx = SeedContext(config=config, seed=seed, out_dir=out, splits=load_dataset(config, seed))
        labeled, pool = seed_and_pool(len(ctx.splits.train), config.suggestion.seed_set_size, seed)
        result = suggest_training_set(ctx.splits.train.X, labeled, pool, config.suggestion,
                                      suggestion_trainer(ctx, config.suggestion.quantize_suggestors))
        dump_json({"seed_set": labeled, **result.model_dump()}, out / "suggested.json")
    echo_json({"suggested": len(result.indices), "iterations": result.iterations_run,
               "exhausted": result.exhausted})
