"""
DATABASE MODELS - SQLAlchemy ORM models for the results store

The store keeps one row per experiment run and one row per metric cell:
- ExperimentRun: recipe, task, config snapshot, output directory, status
- MetricRow: one (axis values, metric, value, seed) cell of a run's CSV table

Rows are deleted together with their run.
"""

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import relationship
from sqlalchemy.sql import func

from powquant.db import Base


class ExperimentRun(Base):
    """
    One run_experiment invocation.

    Written once when the recipe returns or raises, so status is "done" or
    "failed"; a failed run keeps the metric rows flushed before the error.
    """
    __tablename__ = "experiment_runs"
    id = Column(Integer, primary_key=True, index=True)
    recipe = Column(String(32), nullable=False, index=True)
    task = Column(String(8), nullable=False)
    model_size = Column(String(8), nullable=False)
    config_yaml = Column(Text, nullable=False)  # Snapshot of the validated config
    out_dir = Column(Text, nullable=False)
    status = Column(String(16), nullable=False)  # done | failed
    created_at = Column(DateTime(timezone=True), server_default=func.now())

    metrics = relationship("MetricRow", back_populates="run", cascade="all, delete-orphan")


class MetricRow(Base):
    """One metric value for one sweep point and seed."""
    __tablename__ = "metric_rows"
    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("experiment_runs.id", ondelete="CASCADE"), nullable=False)
    axis = Column(String(64), nullable=False)  # e.g. "bits=4,parallel=3"
    metric = Column(String(32), nullable=False)
    value = Column(Float, nullable=False)
    seed = Column(Integer, nullable=False)

    run = relationship("ExperimentRun", back_populates="metrics")
