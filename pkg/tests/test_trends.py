"""
Desk-scale trend checks over three seeds.

These train real models for minutes and are deselected by default; run them
with `pytest -m slow`.
"""

from pathlib import Path

import pytest

from powquant.schemas import ExperimentConfig
from powquant.services.experiments import run_experiment

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

pytestmark = pytest.mark.slow


def means(table, axis):
    rows = table[table["seed"] == "mean"]
    return {key: row for key, (_, row) in zip(rows[axis], rows.iterrows())}


class TestTrends:
    """Test the qualitative trends of the experiment recipes."""

    def test_bitwidth_trend(self, tmp_path):
        """Test 6-8 bits stay within half a point of float and 2 bits falls well below."""
        config = ExperimentConfig.from_yaml(CONFIG_DIR / "cls_bitwidth.yaml",
                                            {"sweep.bit_widths": [2, 6, 7, 8], "output.save_models": False})
        table = run_experiment(config, out_dir=str(tmp_path), record=False).table
        by_bits = means(table, "bits")
        float_accuracy = by_bits[2]["float_accuracy"]
        for bits in (6, 7, 8):
            assert by_bits[bits]["accuracy"] >= float_accuracy - 0.5
        assert by_bits[2]["accuracy"] <= float_accuracy - 2.0

    def test_ensemble_trend(self, tmp_path):
        """Test a three-member ensemble is at least as accurate as its average member."""
        config = ExperimentConfig.from_yaml(CONFIG_DIR / "cls_parallel.yaml",
                                            {"sweep.parallel": [3], "output.save_models": False})
        table = run_experiment(config, out_dir=str(tmp_path), record=False).table
        row = means(table, "parallel")[3]
        assert row["accuracy"] >= row["member_mean_accuracy"]

    def test_suggestion_trend(self, tmp_path):
        """Test suggested samples train a segmenter at least as well as random ones."""
        config = ExperimentConfig.from_yaml(CONFIG_DIR / "seg_suggest.yaml",
                                            {"sweep.bit_widths": [7], "output.save_models": False})
        table = run_experiment(config, out_dir=str(tmp_path), record=False).table
        by_scheme = means(table, "scheme")
        assert by_scheme["float-sa+float-nt"]["seg_avg"] >= by_scheme["random+float-nt"]["seg_avg"]
