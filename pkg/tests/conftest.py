import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

KERNELS = ("uniform", "triangular", "epanechnikov", "biweight", "triweight")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
