"""
REPORT SERVICE - Aggregation over experiment outputs

This service summarizes finished experiments:
1. summarize_csv - the mean / best rows of a recipe CSV
2. compute_report - results-store aggregate: mean and best per recipe, axis and metric
3. render - plain-text table for the CLI

Used by the `report` command.
"""

from pathlib import Path
from typing import Dict, List, Optional, Union

import pandas as pd
from sqlalchemy import func
from sqlalchemy.orm import Session

from powquant import models
from powquant.services.metrics import HIGHER_IS_BETTER
from powquant.utils import get_logger

logger = get_logger(__name__)


def summarize_csv(path: Union[str, Path], which: str = "mean") -> pd.DataFrame:
    """Rows of a recipe CSV whose seed column is "mean" or "best"."""
    table = pd.read_csv(path, dtype={"seed": str})
    if which not in ("mean", "best"):
        raise ValueError("which must be 'mean' or 'best'")
    return table[table["seed"] == which].reset_index(drop=True)


def compute_report(db: Session, recipe: Optional[str] = None) -> Dict[str, List[dict]]:
    """
    Aggregate the results store.

    Input: database session, optional recipe filter
    Output: {"runs": [...], "metrics": [{recipe, axis, metric, mean, best, n}, ...]}
    """
    # STEP 1: Runs
    runs_query = db.query(models.ExperimentRun)
    if recipe:
        runs_query = runs_query.filter(models.ExperimentRun.recipe == recipe)
    runs = [
        {"id": r.id, "recipe": r.recipe, "task": r.task, "model_size": r.model_size,
         "status": r.status, "out_dir": r.out_dir}
        for r in runs_query.order_by(models.ExperimentRun.id).all()
    ]

    # STEP 2: Per (recipe, axis, metric) aggregates
    query = db.query(
        models.ExperimentRun.recipe,
        models.MetricRow.axis,
        models.MetricRow.metric,
        func.avg(models.MetricRow.value),
        func.max(models.MetricRow.value),
        func.min(models.MetricRow.value),
        func.count(models.MetricRow.id),
    ).join(models.ExperimentRun, models.MetricRow.run_id == models.ExperimentRun.id)
    if recipe:
        query = query.filter(models.ExperimentRun.recipe == recipe)
    rows = query.group_by(models.ExperimentRun.recipe, models.MetricRow.axis, models.MetricRow.metric) \
        .order_by(models.ExperimentRun.recipe, models.MetricRow.axis, models.MetricRow.metric).all()

    metrics = []
    for rec, axis, metric, mean, high, low, n in rows:
        best = high if HIGHER_IS_BETTER.get(metric, True) else low
        metrics.append({"recipe": rec, "axis": axis, "metric": metric,
                        "mean": round(float(mean), 4), "best": round(float(best), 4), "n": int(n)})
    logger.info(f"Report over {len(runs)} runs, {len(metrics)} aggregates")
    return {"runs": runs, "metrics": metrics}


def render(frame: pd.DataFrame) -> str:
    if frame.empty:
        return "(no rows)"
    return frame.to_string(index=False, float_format=lambda v: f"{v:.2f}")
