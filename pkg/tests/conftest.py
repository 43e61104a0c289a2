import numpy as np
import pytest

from mafuq.phantom import smooth_phantom

# Relative L2 error of a +45/-45 degree round trip on the 64^3 smooth phantom,
# restricted to the inscribed sphere. Measured 0.00158-0.00168 across the three
# axes; frozen at about 3x the measurement (target in the requirements: <= 2%).
ROUND_TRIP_REL_TOL = 0.005


@pytest.fixture(scope="session")
def phantom():
    return smooth_phantom(64)


@pytest.fixture
def rng():
    return np.random.default_rng(20231015)


_ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion; prints a PASS/FAIL line and asserts."""

    def check(ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {request.node.name}  {detail}".rstrip()
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, detail

    return check


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
