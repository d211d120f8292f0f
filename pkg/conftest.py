#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""Shared pytest fixtures and the --runslow switch for training-run oracles."""

import pytest

from maf_detector.config_manager import ConfigManager
from maf_detector.synthetic_domains import SceneSpec, ShiftSpec, read_dataset, write_dataset

collect_ignore = ["examples"]

TINY_SCENE = SceneSpec(image_size=32, min_objects=1, max_objects=2, min_size=10, max_size=16, seed=3)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run training-run oracles")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: training-run oracle, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    directory = tmp_path_factory.mktemp("tiny-data")
    write_dataset(directory, n_source=3, n_target=3, scene=TINY_SCENE, shift=ShiftSpec(), n_val=2)
    return directory


@pytest.fixture(scope="session")
def tiny_dataset(tiny_data_dir):
    return read_dataset(tiny_data_dir)


def tiny_config(overrides=None) -> ConfigManager:
    """Six-iteration schedule sized for 32x32 images."""
    config = ConfigManager()
    config.update({
        "data.image_size": 32,
        "schedule.phase1_iters": 4,
        "schedule.phase2_iters": 2,
        "train.checkpoint_every": 3,
        "train.log_every": 2,
        "detector.top_n": 8,
    })
    config.update(overrides or {})
    return config


@pytest.fixture
def tiny_manager():
    return tiny_config()


@pytest.fixture
def make_config():
    return tiny_config


@pytest.fixture(scope="session")
def tiny_scene():
    return TINY_SCENE
