import numpy as np
import pytest

from manifoldmc import zoo


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def toy_model():
    return zoo.toy_loop_model(0.1)


@pytest.fixture
def linear_model(rng):
    m = rng.standard_normal((2, 3))
    f = rng.standard_normal(2)
    y = rng.standard_normal(2)
    return zoo.linear_gaussian_model(m, f, 0.7, y)
