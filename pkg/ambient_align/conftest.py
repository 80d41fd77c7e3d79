"""
Shared fixtures: a desk-top-sized configuration small enough for fast tests.
"""

import dataclasses
import functools

import numpy as np
import pytest

from ambient_align.config import config_from_dict
from ambient_align.stage1 import run_stage1
from ambient_align.stage2 import run_stage2
from ambient_align.synthdata import Scenario, build_dataset

TINY_CONFIG = {
    "scenario": {
        "num_sources": 3, "actions_per_source": 2, "duration": 20.0, "num_events": 5,
        "frame_height": 16, "frame_width": 16, "num_sequences": 4,
    },
    "encoder": {
        "embed_dim": 8, "gru_hidden": 8, "sensor_conv_channels": [4, 4],
        "video_spatial_channels": [4, 8], "video_temporal_channels": [4],
    },
    "stage1": {"warmup_epochs": 1, "joint_epochs": 1, "max_epochs": 4, "batch_size": 16},
    "stage2": {"epochs": 2, "batch_size": 16},
    "probe": {"epochs": 5, "batch_size": 16},
    "seed": 3,
}


def tiny_config_dict():
    return {section: dict(values) if isinstance(values, dict) else values
            for section, values in TINY_CONFIG.items()}


@pytest.fixture
def tiny_config():
    return config_from_dict(tiny_config_dict())


def dataset_for(config):
    """Generate the windowed dataset a run with this config trains on."""
    scenario = Scenario.from_config(config.scenario, config.seed)
    return build_dataset(scenario, config.scenario.num_sequences, config.window.window_seconds,
                         config.window.overlap_seconds, config.split.fractions, config.config_hash())


@pytest.fixture(scope="session")
def tiny_dataset():
    return dataset_for(config_from_dict(tiny_config_dict()))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@functools.lru_cache(maxsize=None)
def desk_stage1(seed: int, noise_std: float = 0.1, confidence_percentile: float = 75.0):
    """Stage 1 on the default desk scenario (7 sources, 2 actions each), shared by the slow tests."""
    config = config_from_dict({
        "seed": seed,
        "scenario": {"noise_std": noise_std},
        "stage1": {"confidence_percentile": confidence_percentile},
    })
    dataset = dataset_for(config)
    return config, dataset, run_stage1(dataset, config)


@functools.lru_cache(maxsize=None)
def desk_stage2(seed: int, weight_mode: str = "full"):
    """Default stage 2 (50 epochs) on top of ``desk_stage1(seed)``."""
    config, dataset, stage1 = desk_stage1(seed)
    config = dataclasses.replace(config, stage2=dataclasses.replace(config.stage2, weight_mode=weight_mode))
    return config, dataset, stage1, run_stage2(dataset, stage1.sensor_encoder, stage1.video_encoder, config)
