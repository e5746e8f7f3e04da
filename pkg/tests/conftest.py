"""Shared fixtures: small datasets, networks and a fast experiment config."""

from pathlib import Path

import numpy as np
import pytest
import yaml

from extraction_lab.datasets import gen_blobs_dataset
from extraction_lab.models import OptimizerKind, TrainingConfig
from extraction_lab.neuralnet import Dataset, Network, build_network, train

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def blobs() -> Dataset:
    return gen_blobs_dataset(classes=3, dim=2, per_class=60, margin=6.0, rng=np.random.default_rng(0))


@pytest.fixture(scope="session")
def target_net(blobs: Dataset) -> Network:
    """Small MLP trained to near-perfect accuracy on the blobs."""
    cfg = TrainingConfig(optimizer=OptimizerKind.ADAM, learning_rate=0.01, epochs=100, seed=0)
    return train(build_network(2, 3, (16, 16), seed=0), blobs, cfg)


@pytest.fixture
def small_net() -> Network:
    return build_network(4, 3, (5,), seed=1)


@pytest.fixture
def tiny_config(tmp_path: Path) -> Path:
    """Flat YAML config for a run that finishes in a few seconds."""
    values = {
        "name": "tiny",
        "seed": 3,
        "output_dir": str(tmp_path / "out"),
        "dataset": "blobs",
        "blobs_per_class": 60,
        "hidden_width": 16,
        "target_epochs": 40,
        "target_learning_rate": 0.01,
        "synthesis": "jbda",
        "seeds_per_class": 5,
        "budget": 400,
        "duplication_rounds": 3,
        "window_min": 20,
        "benign_clients": 1,
        "benign_length": 150,
        "ru_samples": 500,
        "sweep_deltas": [0.8, 0.9, 0.95],
    }
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(values), encoding="utf-8")
    return path
