"""
PACK / UNPACK COMMANDS - SQW conversion

pack quantizes a float model (SQW or .npz of named arrays) in one step at
--bits and writes the packed file with its memory report; unpack decodes an
SQW file back into a .npz of float32 arrays.
"""

from pathlib import Path

import click
import numpy as np

from powquant.commands.common import common_options, echo_json, first_bits, first_seed, load_config
from powquant.services import packstore
from powquant.services.experiments import new_model, quantize_untrained
from powquant.utils import handle_cli_errors


@click.command("pack")
@common_options
@click.option("--weights", "weights_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Float model as .sqw or .npz (names like '0.conv2d.weight').")
@click.option("--output", "output_path", type=click.Path(dir_okay=False), required=True)
@handle_cli_errors
def pack(config_path, seed, out_dir, bits, parallel, weights_path, output_path):
    """Quantize every weight tensor without retraining and write an SQW file."""
    config = load_config(config_path, seed, out_dir, bits, parallel)
    model = new_model(config, first_seed(config))
    if weights_path.endswith(".npz"):
        with np.load(weights_path) as arrays:
            model.load_state_dict({name: arrays[name] for name in arrays.files})
    else:
        packstore.read_sqw(weights_path).load_into(model)
    state = quantize_untrained(model, first_bits(config), config.schedule.max_level_override)
    size = packstore.write_sqw(output_path, model, state)
    report = packstore.memory_report(packstore.pack_tensors(model, state))
    echo_json({"bytes": size, **report.model_dump(exclude={"tensors"})})


@click.command("unpack")
@click.argument("sqw_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--output", "output_path", type=click.Path(dir_okay=False), default=None,
              help="Destination .npz (defaults next to the input).")
@handle_cli_errors
def unpack(sqw_path, output_path):
    """Decode an SQW file to float32 arrays."""
    packed = packstore.read_sqw(sqw_path)
    destination = Path(output_path or Path(sqw_path).with_suffix(".npz"))
    np.savez(destination, **packed.to_arrays())
    report = packstore.memory_report(packed)
    echo_json({"output": str(destination), "tensors": [t.model_dump() for t in report.tensors],
               "reduction_ratio": report.reduction_ratio})
