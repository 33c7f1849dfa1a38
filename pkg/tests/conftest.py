import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rackit.model import generate_model

from .helpers import small_config

settings.register_profile(
    "suite",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def tiny_model():
    return generate_model(small_config(), seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
