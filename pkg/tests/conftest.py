import numpy as np
import pytest

from taprestore.autodiff import set_check_finite


@pytest.fixture(autouse=True)
def _finite_checks():
    set_check_finite(True)
    yield
    set_check_finite(False)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training runs")
