"""Pytest configuration and fixtures."""

import numpy as np
import pytest

from src.ectr.data import Batch, generate_simulation
from src.ectr.models import SimulationSpec, TrainConfig
from src.ectr.numerics import make_rng


@pytest.fixture
def rng():
    """Seeded generator shared by a single test."""
    return make_rng(1234)


@pytest.fixture
def two_env_batch():
    """Eight samples in two environments of four, with aux and global index."""
    gen = make_rng(7)
    return Batch(
        x=gen.normal(size=(8, 2)),
        y=np.array([0, 1, 1, 0, 1, 0, 0, 1], dtype=float),
        env=np.repeat([0, 1], 4),
        aux=gen.uniform(size=(8, 1)),
        index=np.arange(8),
    )


@pytest.fixture
def small_spec():
    """A quick simulation: two train and two test environments."""
    return SimulationSpec(n_per_env=200, p_s_test=[0.9, 0.1], seed=3)


@pytest.fixture
def small_dataset(small_spec):
    return generate_simulation(small_spec)


@pytest.fixture
def tiny_config():
    """Short training run on small networks."""
    return TrainConfig(
        epochs=3,
        batch_size=100,
        hidden=[4],
        tail_hidden=[4],
        infer_hidden=[4],
        seed=5,
    )


@pytest.fixture
def flat_config_text():
    """A flat run configuration covering every section."""
    return "\n".join(
        [
            "# small run",
            "simulation.n_per_env = 150",
            "simulation.p_s_test = 0.9, 0.1",
            "simulation.seed = 11",
            "train.method = erm",
            "train.epochs = 2",
            "train.batch_size = 64",
            "train.hidden = 4",
            "sweep.beta = 0.1, 1.0",
            "sweep.seed = 0, 1, 2",
            "",
        ]
    )
