"""
Pytest configuration and fixtures.
"""

import os
import tempfile

# Keep the default results store out of the working tree during tests
os.environ.setdefault(
    "POWQUANT_RESULTS_DB", f"sqlite:///{os.path.join(tempfile.gettempdir(), 'powquant_test_results.db')}"
)

import numpy as np
import pytest
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
from sqlalchemy.pool import StaticPool

from powquant.db import Base
from powquant import models  # noqa: F401  (registers tables)
from powquant.schemas import ExperimentConfig
from powquant.services.nncore import LayerSpec, ModelGraph


@pytest.fixture(scope="session")
def engine():
    """In-memory results store shared by the test session."""
    engine = create_engine("sqlite://", connect_args={"check_same_thread": False}, poolclass=StaticPool)
    Base.metadata.create_all(bind=engine)
    yield engine
    Base.metadata.drop_all(bind=engine)


@pytest.fixture
def session_factory(engine):
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)


@pytest.fixture
def db_session(session_factory):
    session = session_factory()
    yield session
    session.rollback()
    session.close()


@pytest.fixture
def rng():
    """Seeded generator for test data."""
    return np.random.default_rng(1234)


@pytest.fixture
def dense_model():
    """Two dense layers with a softmax head on 6 features."""
    specs = [LayerSpec("dense", units=5), LayerSpec("relu"), LayerSpec("dense", units=3),
             LayerSpec("softmax_output")]
    return ModelGraph((6,), specs, seed=3, name="dense-tiny")


@pytest.fixture
def conv_model():
    """Padded conv, pool, dense head on 6x6x2 images."""
    specs = [LayerSpec("pad2d", pad=1), LayerSpec("conv2d", filters=4, kernel_size=3), LayerSpec("relu"),
             LayerSpec("maxpool2x2"), LayerSpec("flatten"), LayerSpec("dense", units=3),
             LayerSpec("softmax_output")]
    return ModelGraph((6, 6, 2), specs, seed=5, name="conv-tiny")


@pytest.fixture
def rnn_model():
    """Time-distributed dense, bidirectional RNN and per-frame softmax."""
    specs = [LayerSpec("dense", units=4), LayerSpec("relu"), LayerSpec("birnn", hidden=3),
             LayerSpec("dense", units=3), LayerSpec("softmax_output")]
    return ModelGraph((5, 2), specs, seed=7, name="rnn-tiny")


@pytest.fixture
def tiny_cls_config(tmp_path):
    """A cls experiment small enough to run in seconds."""
    return ExperimentConfig.model_validate({
        "config_version": 1,
        "task": "cls",
        "model_size": "small",
        "data": {"n_train": 64, "n_val": 16, "n_test": 32, "image_size": 16, "n_classes": 4},
        "pretrain": {"learning_rate": 0.01, "epochs": 1, "batch_size": 16},
        "optimizer": {"learning_rate": 0.001, "epochs": 1, "batch_size": 16},
        "schedule": {"epochs_per_step": 1},
        "sweep": {"recipe": "bitwidth-sweep", "bit_widths": [3, 5], "seeds": [0, 1]},
        "output": {"out_dir": str(tmp_path / "run")},
    })
