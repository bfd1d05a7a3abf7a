import sys

import numpy as np
import pytest

from cyclepose.config import DataConfig, ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Small float64 model for gradient and structure checks."""
    return ModelConfig(image_size=(32, 32), patch_size=8, embed_dim=16, num_layers=2, num_heads=2,
                       mlp_ratio=2.0, num_keypoints=5, heatmap_size=(8, 8), num_cycles=2, dtype="float64")


@pytest.fixture
def tiny_data_config():
    return DataConfig(image_size=(32, 32), heatmap_size=(8, 8), n_train=64, n_val=32)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
