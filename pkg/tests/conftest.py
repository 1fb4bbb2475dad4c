import numpy as np
import pytest

from djscc_hbf.numeric import ComplexGrid


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def grid(z):
    return ComplexGrid.from_numpy(z)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k[1:])):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
