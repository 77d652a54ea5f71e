import numpy as np
import pytest

from sectflow.flow import attractor_points, lorenz63


@pytest.fixture(scope="session")
def lorenz():
    return lorenz63()


@pytest.fixture(scope="session")
def lorenz_points(lorenz):
    return attractor_points(lorenz, 400, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


# ---------------------------------------------------------------- acceptance verdicts

VERDICTS = []


@pytest.fixture(scope="session")
def verdict():
    """Record and print one PASS/FAIL line per acceptance criterion, then assert it."""
    def report(n: int, name: str, ok: bool, detail: str = ""):
        line = f"criterion {n:2d} {name}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        VERDICTS.append((n, line))
        print(line, flush=True)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(VERDICTS):
            terminalreporter.write_line(line)
