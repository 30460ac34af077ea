import numpy as np
import pytest

from linland.model import Dataset, WeightStack


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_dataset(rng, d0, dH, m):
    """Full-row-rank gaussian dataset (resampled in the unlucky case)."""
    while True:
        X = rng.standard_normal((d0, m))
        Y = rng.standard_normal((dH, m))
        if np.linalg.matrix_rank(X) == d0 and np.linalg.matrix_rank(Y) == dH:
            return Dataset(X, Y)


def random_stack(rng, widths):
    layers = tuple(
        rng.standard_normal((widths[i + 1], widths[i])) / np.sqrt(widths[i])
        for i in range(len(widths) - 1)
    )
    return WeightStack(layers)
