import sys

import numpy as np
import pytest

from pedmri.geometry import fibonacci_directions


def random_unit(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def sym_fib90():
    """45 hemisphere Fibonacci points plus their antipodes."""
    h = fibonacci_directions(45)
    return np.vstack([h, -h])


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "CRITERIA_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
