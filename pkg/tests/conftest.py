import numpy as np
import pytest

from gapmeta import linalg


@pytest.fixture(scope="session", autouse=True)
def warm_numba():
    # compile (or load the cached) jacobi kernels before any timed test runs
    linalg.svd(np.arange(6.0).reshape(2, 3))
    linalg.svd(np.zeros((2, 4)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
