import numpy as np
import pytest

from nsbayes.model import Dataset, rng_from, simulate


@pytest.fixture
def e1():
    """2x2 instance with s2 = 1 and means (2, 0), used throughout."""
    return Dataset(np.array([[1.0, 3.0], [-1.0, 1.0]]))


def random_dataset(seed, n_max=50, j_max=6):
    """A random instance plus the rng used, for reproducible oracles."""
    rng = rng_from(seed)
    n = int(rng.integers(1, n_max + 1))
    j = int(rng.integers(2, j_max + 1))
    sigma2 = float(rng.uniform(0.2, 4.0))
    mu = rng.normal(0.0, 3.0, size=n)
    return simulate(n, j, sigma2, mu, rng=rng)
