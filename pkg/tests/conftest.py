import mpmath
import pytest

from compound_norm.numerics import Rng

mpmath.mp.dps = 50


@pytest.fixture
def rng():
    return Rng(1234)
