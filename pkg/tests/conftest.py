import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stochns.spectral import Truncation

settings.register_profile(
    "default", max_examples=20, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def tr4():
    return Truncation(4)


@pytest.fixture(scope="session")
def tr2():
    return Truncation(2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
