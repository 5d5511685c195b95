"""
Shared fixtures for the TRG toolkit test suite
"""

import os
import sys

import numpy as np
import pytest

# Add project root to Python path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config.run_config import RunConfig  # noqa: E402
from synthetic.grammar import generate  # noqa: E402

TINY_RUN = {
    "seed": 11,
    "frames": 4,
    "height": 8,
    "width": 8,
    "channels": 4,
    "heads": 2,
    "noise": 0.1,
    "train_count": 12,
    "val_count": 6,
    "num_test_clips": 1,
    "epochs": 2,
    "drop_epoch": 1,
    "batch_size": 4,
    "heads_sweep": [1, 2],
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_run() -> dict:
    """Flat run-config values small enough for end-to-end tests"""
    return dict(TINY_RUN)


@pytest.fixture
def tiny_config(tiny_run, tmp_path) -> RunConfig:
    return RunConfig.from_dict({**tiny_run, "out_dir": str(tmp_path / "run")})


@pytest.fixture
def tiny_splits(tiny_config):
    dataset = generate(tiny_config.grammar(), tiny_config.train_count + tiny_config.val_count, tiny_config.seed)
    return dataset.split(tiny_config.train_count)
