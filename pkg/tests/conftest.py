import numpy as np
import pytest

from zapstop.chain import FiniteChainModel, random_finite_chain
from zapstop.features import random_basis


@pytest.fixture(scope="session")
def instance():
    """The 10-state chain with a rank-4 random basis used throughout the statistical tests."""
    return random_finite_chain(10, 0, 0.95), random_basis(10, 4, 0)


@pytest.fixture
def cycle():
    return FiniteChainModel(P=[[0.0, 1.0], [1.0, 0.0]], c=[0.5, 1.0], c_s=[1.0, 2.0], beta=0.9)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
