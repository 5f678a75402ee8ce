import numpy as np
import pytest

from hano.data import generate_trig
from hano.model import HanoConfig

SMOKE_N = 64
SMOKE_COUNT = 130   # 100 train, 10 val, 20 test
SMOKE_SEED = 0


@pytest.fixture(scope="session")
def smoke_samples():
    _, samples, _ = generate_trig(SMOKE_N, SMOKE_COUNT, SMOKE_SEED)
    return samples


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """r = 3, C = 4, k = 1 on 16 x 16 inputs (4 x 4 patches)."""
    return HanoConfig(levels=3, widths=(4, 4, 4), windows=(3, 3, 3), patch=4, cycles=1)
