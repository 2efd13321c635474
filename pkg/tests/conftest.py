"""
Shared fixtures: seeded generators, small networks and a fast run config.
"""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import DatasetConfig, ExperimentConfig
from src.network import init_parameters, toynet_2layer, toynet_residual


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def residual_net():
    return toynet_residual((1, 8, 8), 3)


@pytest.fixture
def two_layer_net():
    return toynet_2layer((2, 5, 5), 3)


@pytest.fixture
def residual_params(residual_net, rng):
    return init_parameters(residual_net, rng)


def random_mask(spec, rng, p=0.5):
    return {i: rng.random(spec.layers[i].geom.in_channels) < p for i in spec.conv_layers}


@pytest.fixture
def fast_config():
    """A few epochs on a tiny synthetic task."""
    return ExperimentConfig(
        network='toynet-residual',
        dataset=DatasetConfig(task_seed=3, classes=3, samples_per_class=12, test_samples_per_class=6,
                              image_shape=(1, 8, 8), noise=0.3),
        strategy='topk_random',
        mode='dynamic',
        budget_fraction=0.15,
        epochs=3,
        warmup_epochs=1,
        lr_max=0.125,
        batch_size=8,
        seeds=(0,),
    )
