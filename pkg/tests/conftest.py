import time

import numpy as np
import pytest

from ncscatter import problem
from ncscatter import scattering as sc

XI_MINUS = np.array([0.0, 1.0, 0.0])
XI_PLUS = np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)
GRID_FACTORS = (2.0, 4.0, 8.0, 16.0)

_TIMINGS: dict[str, float] = {}
_ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def timings():
    """Wall-clock seconds spent building the expensive session fixtures."""
    return _TIMINGS


@pytest.fixture(scope="session")
def acceptance():
    """Record one pass/fail line per criterion; shown in the terminal summary."""

    def record(k, passed, detail, seconds):
        line = f"{'PASS' if passed else 'FAIL'} criterion {k}: {detail} [{seconds:.1f} s]"
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return record


@pytest.fixture(scope="session")
def setup():
    return problem.ProblemSetup(centres=[[-1, 0, 0], [1, 0, 0]], masses=[1, 1], alpha=1.5, energy_H=0.5)


@pytest.fixture(scope="session")
def consts(setup):
    return problem.calibrate(setup)


@pytest.fixture(scope="session")
def kepler_setup():
    return problem.ProblemSetup(centres=[[0, 0, 0]], masses=[1], alpha=1.0, energy_H=0.5)


@pytest.fixture(scope="session")
def scatter_run(setup, consts):
    """Full radius sweep on the default problem (about a minute)."""
    grid = consts.K_radius * np.array(GRID_FACTORS)
    t0 = time.perf_counter()
    run = sc.scatter(setup, consts, XI_MINUS, XI_PLUS, R_grid=grid)
    _TIMINGS["scatter_run"] = time.perf_counter() - t0
    return run


@pytest.fixture(scope="session")
def bolza_8k(setup, consts):
    """Critical path at R = 8K, n = 256."""
    t0 = time.perf_counter()
    res = sc.bolza_solve(setup, consts, 8 * consts.K_radius, XI_MINUS, XI_PLUS, n=256)
    _TIMINGS["bolza_8k"] = time.perf_counter() - t0
    return res
