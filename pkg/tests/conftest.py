import numpy as np
import pytest

from helpers import random_batch, small_model


@pytest.fixture
def model():
    return small_model()


@pytest.fixture
def batch():
    return random_batch(np.random.default_rng(5), 6, 4, 3, 2)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
