import numpy as np
import pytest

from blockprune.data import gen_blobs


@pytest.fixture(scope="session")
def small_blobs():
    return gen_blobs(4, (1, 8, 8), 50, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(fn, x, h=1e-6):
    """d fn / d x for scalar ``fn`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g
