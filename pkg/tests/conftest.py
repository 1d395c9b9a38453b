import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from needlecheck.problem import PathEnsemble, TimeGrid
from needlecheck.problems import build

settings.register_profile("needlecheck", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("needlecheck")


@pytest.fixture(scope="session")
def ex1():
    return build("example1")


@pytest.fixture(scope="session")
def ex2():
    return build("example2")


@pytest.fixture(scope="session")
def ex1_adjoints(ex1):
    from needlecheck.adjoint import solve_adjoints

    grid = TimeGrid(64, 1.0)
    base = ex1.policy(grid)
    return grid, base, solve_adjoints(ex1.problem, base, PathEnsemble(grid, 8, 0), 4)


@pytest.fixture(scope="session")
def ex2_adjoints(ex2):
    from needlecheck.adjoint import solve_adjoints

    grid = TimeGrid(64, 1.0)
    base = ex2.policy(grid)
    return grid, base, solve_adjoints(ex2.problem, base, PathEnsemble(grid, 8, 0), 4)


def rng(seed=0):
    return np.random.default_rng(seed)


# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
