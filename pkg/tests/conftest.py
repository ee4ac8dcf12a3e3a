import math

import numpy as np
import pytest

from fujita_lab.groups import heisenberg_lattice, make_group

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def gaussian(x, t, n=1):
    """Euclidean heat kernel of u_t = Laplacian u."""
    return (4 * math.pi * t) ** (-n / 2) * np.exp(-(x**2) / (4 * t))


@pytest.fixture(scope="session")
def line():
    """Euclidean line, large periodic box (spectral propagator)."""
    return make_group("euclidean", n=1, points=1024, extent=60.0)


@pytest.fixture(scope="session")
def wide_line():
    """Box wide enough for kernels up to t ~ 100."""
    return make_group("euclidean", n=1, points=2048, extent=240.0)


@pytest.fixture(scope="session")
def circle():
    return make_group("torus", n=1, points=32)


@pytest.fixture(scope="session")
def small_h1():
    return heisenberg_lattice((16, 16, 32), 0.5)
