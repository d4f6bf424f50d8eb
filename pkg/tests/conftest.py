import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stseg.config import DecoderConfig, default_run_config  # noqa: E402
from stseg.datagen import benchmark_dataset  # noqa: E402


def small_dataset_cfg(**kw):
    cfg = default_run_config()["dataset"]
    cfg.update(width=32, height=32, num_frames=12, num_train=4, num_val=2, num_test=2)
    cfg.update(kw)
    return cfg


@pytest.fixture(scope="session")
def small_dataset():
    return benchmark_dataset(small_dataset_cfg())


@pytest.fixture
def tiny_cfg():
    return DecoderConfig(num_layers=2, kernel_t=3, feature_size=8, temporal_window=4, num_classes=3, encoder_channels=(4, 8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
