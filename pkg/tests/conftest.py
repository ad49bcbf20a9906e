import numpy as np
import pytest

from ratefactor.simgen import load_demo_params, simulate


@pytest.fixture(scope="session")
def mul_sim():
    return simulate(load_demo_params("MUL"), 120, seed=3)


@pytest.fixture(scope="session")
def small_counts(mul_sim):
    return mul_sim.counts.rows(0, 60)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
