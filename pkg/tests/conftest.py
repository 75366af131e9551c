import numpy as np
import pytest

from otreg.instances import crease_pair, identity_pair, shift_pair, smooth_pair
from otreg.transport import solve_ot


@pytest.fixture(scope="session")
def identity():
    pair = identity_pair(64)
    return pair, solve_ot(pair, 1024)


@pytest.fixture(scope="session")
def smooth():
    pair = smooth_pair(64, eps=0.02)
    return pair, solve_ot(pair, 1024)


@pytest.fixture(scope="session")
def shift():
    pair = shift_pair(0.1, n=128, half_width=2.0)
    return pair, solve_ot(pair, 2304)


@pytest.fixture(scope="session")
def crease():
    pair = crease_pair(64)
    return pair, solve_ot(pair, 1024)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: list[tuple[int, str]] = []


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion."""

    def rec(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"[{number:2d}] {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        _CRITERIA.append((number, line))
        print(line)
        return passed

    return rec


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
