import numpy as np
import pytest

from beltscan.hypercube import DEFAULT_GRID, HyperCube


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_cube(rng, h=8, w=8, bands=184, stages=()):
    return HyperCube(rng.random((h, w, bands)).astype(np.float32), DEFAULT_GRID, stages)


_CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA] = []


@pytest.fixture
def verdict(request):
    """Record one pass/fail line for an acceptance criterion; returns ``ok`` for asserting."""
    lines = request.config.stash[_CRITERIA]

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
