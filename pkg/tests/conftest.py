"""
Shared fixtures: tiny model and run configurations that keep the suite fast
"""

import numpy as np
import pytest

from mmfuse.config import ModelConfig, RunConfig

TINY_ARCH = {
    "geometry": (4, 16, 16),
    "backbone_channels": (4, 4, 8),
    "bfpu_channels": 4,
    "feature_dim": 16,
    "cab_reduction": 2,
    "pyramid_dims": (16, 8, 4),
    "token_dim": 4,
    "heads": 2,
    "kan_hidden": 8,
    "kan_grid": 5,
}


def tiny_model_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TINY_ARCH, **overrides})


def tiny_run_config(**overrides) -> RunConfig:
    base = {
        **TINY_ARCH,
        "seed": 3,
        "epochs": 2,
        "lr": 0.01,
        "batch_size": 4,
        "n_majority": 12,
        "n_minority": 6,
        "class_signal": 3.0,
        "tabular_signal": 1.0,
    }
    return RunConfig(**{**base, **overrides})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def model_config():
    return tiny_model_config()


@pytest.fixture
def run_config():
    return tiny_run_config()
