import numpy as np
import pytest

from trajdiff.core import Grid, Trajectory


@pytest.fixture
def grid4():
    return Grid(4, 4, origin_lat=39.9, origin_lon=116.3, cell_side_m=515.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def traj(slots, user="u", day=0):
    return Trajectory(user, day, tuple(slots))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
