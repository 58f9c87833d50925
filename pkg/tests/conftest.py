import numpy as np
import pytest

from weightalign import tensor
from weightalign.normalize import reset_sample_stat_count


@pytest.fixture(autouse=True)
def double_precision():
    tensor.set_precision("double")
    reset_sample_stat_count()
    yield
    tensor.set_precision("double")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
