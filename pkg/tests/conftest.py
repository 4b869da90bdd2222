import numpy as np
import pytest

from chernoff_kit import Grid, GeneratorSpec, sample


@pytest.fixture
def grid1():
    return Grid(-np.pi, np.pi, 128)


@pytest.fixture
def smooth(grid1):
    return sample(grid1, lambda x: np.exp(np.cos(x)))


@pytest.fixture
def variable_spec():
    g = Grid(-np.pi, np.pi, 256)
    return GeneratorSpec(g, lambda x: 0.5 * (1 + 0.3 * np.sin(x)), lambda x: 0.2 * np.cos(x),
                         lambda x: 0.1 * (1 + np.cos(x) ** 2))
