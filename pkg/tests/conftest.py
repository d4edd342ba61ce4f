import numpy as np
import pytest

from rote.datasets import Interaction


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TOY_LOG = [
    ("u1", "b", 100), ("u1", "b", 200), ("u1", "b", 300), ("u1", "c", 400),
    ("u2", "a", 100), ("u2", "a", 200), ("u2", "a", 300), ("u2", "a", 400),
    ("u2", "a", 500), ("u2", "b", 600), ("u2", "b", 700), ("u2", "c", 800),
]


@pytest.fixture
def toy_log():
    return [Interaction(u, i, t) for u, i, t in TOY_LOG]


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
