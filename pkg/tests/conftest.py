import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from powertalk.grid_model import Topology, uniform_params
from powertalk.training import make_plan

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda x: x[0]):
            terminalreporter.write_line(line[1])


@pytest.fixture(scope="session")
def ref_params():
    def make(N):
        return uniform_params(Topology.line(N), 1000.0, 200.0, 200.0, 0.0, 1.0)

    return make


@pytest.fixture(scope="session")
def small_plan():
    """N=3 plan, short epoch, default layout."""
    return make_plan(3, T=300, tau=50e-3, sqrt_pi=10.0, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
