"""Shared fixtures: quiet console, small synthesis configs and a tiny dataset."""

import pytest

from keypatch_ready import console
from keypatch_ready.dataset_synth import SynthConfig, synthesize_dataset


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run tests marked slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def quiet_console():
    console.set_verbose(False)
    yield
    console.set_verbose(True)


@pytest.fixture
def small_cfg():
    return SynthConfig(image_size=(128, 96), count=4, validation_count=2, max_patches=3,
                       source_radius_px=16, min_short_axis_px=8.0)


@pytest.fixture
def tiny_dataset(tmp_path, small_cfg):
    root = str(tmp_path / "data")
    synthesize_dataset(root, small_cfg, seed=11)
    return root
