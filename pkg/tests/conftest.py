import numpy as np
import pytest

from asymml.dataset import SyntheticConfig, generate_synthetic
from asymml.models import build_synthetic_teacher


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_data():
    cfg = SyntheticConfig(num_classes=8, train_size=160, db_size=60, num_queries=12,
                          d_in=6, d_teacher=5, seed=3)
    data = generate_synthetic(cfg)
    return data, build_synthetic_teacher(data)


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance
    if test_acceptance.LINES:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.LINES:
            terminalreporter.write_line(line)
