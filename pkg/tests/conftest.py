import numpy as np
import pytest

from demorph.synthetic import synthetic_pool


@pytest.fixture(scope="session")
def faces32():
    return synthetic_pool(8, 32, seed=11)


@pytest.fixture(scope="session")
def faces64():
    return synthetic_pool(6, 64, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
