import numpy as np
import pytest

from fracdtn.geometry import build_grid, partition
from fracdtn.operator import EllipticTensorField, assemble_local_operator, spectral_fractional_power

R = 1.5
OMEGA = {"type": "ball", "center": [0.0, 0.0], "radius": 0.5}
OBSTACLE = {"type": "ball", "center": [0.0, 0.0], "radius": 0.15}
UPPER = {"type": "box", "lo": [-R, 0.55], "hi": [R, R]}
LOWER = {"type": "box", "lo": [-R, -R], "hi": [R, -0.55]}


def ring(a, b):
    """Square ring of boxes around Omega, between half-widths a and b."""
    return {"type": "union", "parts": [
        {"type": "box", "lo": [-b, a], "hi": [b, b]},
        {"type": "box", "lo": [-b, -b], "hi": [b, -a]},
        {"type": "box", "lo": [-b, -a + 0.01], "hi": [-a, a - 0.01]},
        {"type": "box", "lo": [a, -a + 0.01], "hi": [b, a - 0.01]},
    ]}


RING = ring(0.55, 0.9)


@pytest.fixture(scope="session")
def grid33():
    return build_grid(2, R, 33)


@pytest.fixture(scope="session")
def local33(grid33):
    return assemble_local_operator(grid33, EllipticTensorField.constant(np.eye(2)))


@pytest.fixture(scope="session")
def Ls33(local33):
    return spectral_fractional_power(local33, 0.5)


@pytest.fixture(scope="session")
def Ls33_aniso(grid33):
    A = EllipticTensorField.named("rotated", 2, {"a": 1.0, "b": 2.5, "angle": 0.3, "twist": 0.6})
    return spectral_fractional_power(assemble_local_operator(grid33, A), 0.7)


@pytest.fixture(scope="session")
def part_halves(grid33):
    return partition(grid33, OMEGA, OBSTACLE, UPPER, LOWER)


@pytest.fixture(scope="session")
def part_full(grid33):
    return partition(grid33, OMEGA, OBSTACLE)


@pytest.fixture(scope="session")
def part_ring(grid33):
    return partition(grid33, OMEGA, OBSTACLE, RING, RING)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in mod.CRITERIA:
        if name in mod.RESULTS:
            terminalreporter.write_line(mod.format_line(name))
