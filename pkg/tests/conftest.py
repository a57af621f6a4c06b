import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from drorecode.rank_model import ChannelModel, build_table

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def model16():
    return ChannelModel(0.2, 16)


@pytest.fixture(scope="session")
def table16(model16):
    return build_table(model16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
