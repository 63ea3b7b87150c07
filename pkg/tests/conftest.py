import numpy as np
import pytest

from dwmest.data import Dataset


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)


def synthetic_dataset(rng, n=400, missing_rate=0.35, seed_treat=None):
    """Small generic sample with nonrandom assignment and MAR outcomes."""
    x = np.column_stack([rng.normal(1.0, 1.7, n), rng.normal(2.0, 1.4, n)])
    w = (0.05 - 0.2 * x[:, 0] - 0.11 * x[:, 1] + rng.logistic(size=n) > 0).astype(int)
    s_index = 0.6 + 0.05 * x[:, 0] - 0.25 * x[:, 1] + 0.1 * w
    s = (s_index + rng.logistic(size=n) > 0).astype(int)
    y = 1.0 + x @ np.array([1.0, 0.5]) + 0.4 * w + rng.normal(size=n)
    y = np.where(s == 1, y, np.nan)
    return Dataset.from_arrays(y, w, s, x, covariate_names=("x1", "x2"))


@pytest.fixture
def small_ds(rng):
    return synthetic_dataset(rng)
