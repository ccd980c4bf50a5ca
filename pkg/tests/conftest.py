import numpy as np
import pytest

from psfkit.grid import Grid
from psfkit.operators import BlurOperator


@pytest.fixture(scope="session")
def grid9():
    return Grid(9, 9)


@pytest.fixture(scope="session")
def grid17():
    return Grid(17, 17)


@pytest.fixture(scope="session")
def grid33():
    return Grid(33, 33)


@pytest.fixture
def blur17(grid17):
    return BlurOperator(grid17)


@pytest.fixture
def blur33(grid33):
    return BlurOperator(grid33)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
