import numpy as np
import pytest

from pathinfer.encoder import LatentGraph
from pathinfer.graph import Graph

A, B, C = 0, 1, 2


@pytest.fixture
def triangle():
    """Bidirected triangle A, B, C."""
    return Graph(3, [(A, B), (A, C), (B, A), (B, C), (C, A), (C, B)])


@pytest.fixture
def cycle():
    """Directed 3-cycle A -> B -> C -> A."""
    return Graph(3, [(A, B), (B, C), (C, A)])


@pytest.fixture
def uniform_triangle(triangle):
    return LatentGraph(triangle, np.full(6, 0.5))


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
