import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tckim.dataset import from_arrays

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_dataset(rng, n, v, t, missing=0.3, labels=False, ensure_observed=True):
    """Gaussian values with Bernoulli(missing) gaps; optionally keep one observed cell per variable."""
    values = rng.normal(size=(n, v, t))
    mask = rng.random((n, v, t)) >= missing
    if ensure_observed:
        for j in range(v):
            if not mask[:, j].any():
                mask[rng.integers(n), j, rng.integers(t)] = True
    y = rng.permutation(np.arange(n) % 2 + 1) if labels else None
    return from_arrays(values, mask, labels=y)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
