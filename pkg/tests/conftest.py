# conftest.py
# LeaSE Engine - Shared Test Fixtures
# Created by Digital COE Gen AI Team

import numpy as np
import pytest
from loguru import logger

from leasenas.ai.nn import init_weights
from leasenas.ai.searchspace import ArchParams
from leasenas.config import build_run_config
from leasenas.models.schemas import AudienceSpec, CellSpec, ExplainerSpec, Hyperparams
from leasenas.services.data import LabeledSet


@pytest.fixture(autouse=True)
def quiet_logs():
    """Keep loguru output at WARNING during tests."""
    logger.remove()
    logger.add(lambda message: None, level="WARNING")
    yield
    logger.remove()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cell():
    return CellSpec(n_nodes=2, channels=2)


@pytest.fixture
def tiny_explainer_spec(tiny_cell):
    return ExplainerSpec(in_channels=1, num_classes=3, cells=1, cell=tiny_cell)


@pytest.fixture
def tiny_audience_spec():
    return AudienceSpec(in_channels=1, num_classes=3, conv1_channels=2, conv2_channels=3)


@pytest.fixture
def tiny_hp():
    return Hyperparams(xi_e=0.05, xi_delta=0.05, xi_w=0.05, eta=0.01, gamma=1.0, epsilon=0.1)


def make_batch(rng, n=3, size=5, num_classes=3):
    return LabeledSet(images=rng.uniform(0.0, 1.0, size=(n, 1, size, size)), labels=np.arange(n) % num_classes)


@pytest.fixture
def tiny_batch(rng):
    return make_batch(rng)


@pytest.fixture
def batch_factory(rng):
    """Draw further independent batches from the shared generator."""
    return lambda **kwargs: make_batch(rng, **kwargs)


@pytest.fixture
def tiny_weights(tiny_explainer_spec, tiny_audience_spec, tiny_cell, rng):
    E = init_weights(0, tiny_explainer_spec)
    W = init_weights(0, tiny_audience_spec)
    A = ArchParams.from_logits(0.5 * rng.normal(size=(tiny_cell.num_edges, tiny_cell.num_ops)))
    return E, W, A


@pytest.fixture
def tiny_run_config(tmp_path):
    """Few-iteration run on a small synthetic task, writing under tmp_path."""
    return build_run_config({
        "search": {"xi_e": 0.05, "xi_w": 0.05, "xi_delta": 0.05, "eta": 0.01},
        "cell": {"n_nodes": 2, "channels": 2},
        "network": {"search_cells": 1, "eval_cells": 1, "audience_channels": "2, 3"},
        "data": {"image_size": 6, "num_classes": 4, "n_per_split": 8, "test_size": 8, "batch_size": 4},
        "run": {"iterations": 3, "eval_epochs": 1, "seed": 7, "out_dir": str(tmp_path / "run")},
    })
