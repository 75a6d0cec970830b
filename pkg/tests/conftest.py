import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from oscillab import akbuilder, qpfun

settings.register_profile(
    "oscillab",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("oscillab")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running construction (tens of seconds)")


@pytest.fixture(scope="session")
def golden():
    return qpfun.golden_frequency()


@pytest.fixture(scope="session")
def sched1(golden):
    return akbuilder.build_schedule(golden, depth=1)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240601)
