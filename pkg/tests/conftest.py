import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_cfg():
    from caggnet.models import ModelConfig

    return ModelConfig(levels=2, columns=1, base_channels=2, in_channels=1,
                       seed=3, dtype="double")
