"""
COMMAND HELPERS - Options and plumbing shared by every subcommand

1. Common flags: --config, --seed, --out, --bits, --parallel
2. load_config - YAML file (or defaults) with flag overrides applied
3. run_log - JSON-lines log under the output directory for the command's lifetime
4. echo_json - machine-readable output on stdout (logs go to stderr)
"""

import json
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, Optional

import click

from powquant.schemas import ExperimentConfig
from powquant.utils import attach_jsonl_log, detach_log

config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                             help="Experiment YAML file (config_version: 1).")
seed_option = click.option("--seed", type=int, default=None, help="Seed (replaces sweep.seeds).")
out_option = click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
                          help="Output directory (replaces output.out_dir).")
bits_option = click.option("--bits", type=int, default=None, help="Bit width (replaces sweep.bit_widths).")
parallel_option = click.option("--parallel", type=int, default=None,
                               help="Ensemble size (replaces sweep.parallel).")


def common_options(func):
    for option in reversed((config_option, seed_option, out_option, bits_option, parallel_option)):
        func = option(func)
    return func


def load_config(config_path: Optional[str] = None, seed: Optional[int] = None, out_dir: Optional[str] = None,
                bits: Optional[int] = None, parallel: Optional[int] = None, **extra: Any) -> ExperimentConfig:
    """Config file (or defaults) with command-line flags winning over file values."""
    overrides: Dict[str, Any] = {}
    if seed is not None:
        overrides["sweep.seeds"] = [seed]
    if out_dir is not None:
        overrides["output.out_dir"] = out_dir
    if bits is not None:
        overrides["sweep.bit_widths"] = [bits]
    if parallel is not None:
        overrides["sweep.parallel"] = [parallel]
    overrides.update({k: v for k, v in extra.items() if v is not None})
    if config_path:
        return ExperimentConfig.from_yaml(config_path, overrides)

    raw: Dict[str, Any] = {}
    for dotted, value in overrides.items():
        node = raw
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    return ExperimentConfig.model_validate(raw)


def first_seed(config: ExperimentConfig) -> int:
    return config.sweep.seeds[0]


def first_bits(config: ExperimentConfig) -> int:
    return config.sweep.bit_widths[0]


@contextmanager
def run_log(out_dir: str) -> Iterator[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    handler = attach_jsonl_log(out / "run.jsonl")
    try:
        yield out
    finally:
        detach_log(handler)


def echo_json(data: Any) -> None:
    click.echo(json.dumps(data, indent=2, default=str))
