import numpy as np
import pytest

from gaussfields import GridConfig, Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def tiny_grid_config():
    # Small enough for exhaustive finite-difference sweeps.
    return GridConfig(dim=3, levels=2, n_min=3, n_max=6, features_per_level=1,
                      table_size=2 ** 8)


def rel_err(a, b, floor=1e-10):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.max(np.abs(a - b) / denom)
