import numpy as np
import pytest

from ancl_lab import nn


@pytest.fixture
def tiny_multi_arch():
    return nn.ArchSpec(2, (4, 3), (2, 2), "multi")


@pytest.fixture
def tiny_single_arch():
    return nn.ArchSpec(2, (4, 3), (4,), "single")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
