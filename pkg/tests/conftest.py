"""
Shared fixtures: seeded factories, tiny geometries and their projectors.
"""

import numpy as np
import pytest

from tools.framelet_tools import build_filter_bank
from utils.monitoring import PerformanceMonitor
from utils.test_helpers import InstanceFactory


@pytest.fixture
def factory():
    return InstanceFactory(seed=1234)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


@pytest.fixture(scope="session")
def session_factory():
    """Caches system matrices across the whole run."""
    return InstanceFactory(seed=0)


@pytest.fixture(scope="session")
def A8(session_factory):
    return session_factory.system_matrix(8)


@pytest.fixture(scope="session")
def A16(session_factory):
    return session_factory.system_matrix(16)


@pytest.fixture
def bspline_bank():
    return build_filter_bank("bspline-linear")


@pytest.fixture
def monitor():
    return PerformanceMonitor()
