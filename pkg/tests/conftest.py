import numpy as np
import pytest

from roughspde.rough_path import lift_brownian, lift_canonical
from roughspde.rpde import RpdeProblem
from roughspde.spectral_space import ModeBasis, TimeGrid
from roughspde.vector_fields import ginzburg_landau_fields


def smooth_path(t):
    """A smooth two-dimensional test path with non-trivial area."""
    t = np.asarray(t, dtype=float)
    return np.stack([0.8 * np.sin(2 * np.pi * t) + t, np.cos(3 * t) - 1 + 0.5 * t**2], axis=-1)


@pytest.fixture(scope="session")
def basis4():
    return ModeBasis(4, 1.0)


@pytest.fixture(scope="session")
def gl4(basis4):
    return ginzburg_landau_fields(basis4)


@pytest.fixture(scope="session")
def xi4(basis4):
    return 0.5 * basis4.mode(basis4.sin_index(1)) / np.sqrt(2.0)


@pytest.fixture(scope="session")
def smooth_driver8():
    return lift_canonical(smooth_path, TimeGrid(0.0, 1.0, 8), 11)


@pytest.fixture(scope="session")
def brownian_driver8():
    return lift_brownian(3, 2, TimeGrid(0.0, 1.0, 8), "strat")


@pytest.fixture(scope="session")
def gl_problem(basis4, gl4, xi4, smooth_driver8):
    _, N, fields = gl4
    return RpdeProblem(basis4, N, tuple(fields), smooth_driver8, xi4)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance measurements")


_ACCEPTANCE_LINES: list = []


@pytest.fixture
def report(capsys):
    """Print and record one ``PASS``/``FAIL`` line per acceptance criterion."""

    def emit(number, ok, detail, info=()):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        _ACCEPTANCE_LINES.extend(f"             info: {x}" for x in info)
        with capsys.disabled():
            print("\n" + line)
            for x in info:
                print(f"    info: {x}")
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
