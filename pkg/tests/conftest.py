import numpy as np
import pytest

from dyadlab.tree import TreeConfig, build_tree


@pytest.fixture
def binary2():
    """N=2, d=2, b=2, sigma=1: seven nodes."""
    return build_tree(TreeConfig(2))


@pytest.fixture
def binary1():
    return build_tree(TreeConfig(1))


def unit(tree, node=1):
    x = np.zeros(tree.n_nodes)
    x[node] = 1.0
    return x


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
