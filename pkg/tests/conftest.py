import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from wavediff.shapes import icosphere

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def sphere_mesh():
    return icosphere(4, 0.3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
