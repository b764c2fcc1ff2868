import numpy as np
import pytest

from finite_calderon.forward import Potential
from finite_calderon.grid import BallSpec, BoxSpec, TorusGrid, build_domain


@pytest.fixture(scope="session")
def box16():
    return build_domain(TorusGrid(16), BoxSpec(0.125, 0.875))


@pytest.fixture(scope="session")
def small_box():
    """Box [1/4, 3/4] at m = 16: 8^3 interior cells."""
    return build_domain(TorusGrid(16), BoxSpec(0.25, 0.75))


@pytest.fixture(scope="session")
def ball32():
    return build_domain(TorusGrid(32), BallSpec((0.5, 0.5, 0.5), 0.3))


@pytest.fixture(scope="session")
def gauss_q(box16):
    g = box16.grid
    X, Y, Z = g.mesh()
    v = 2.0 * np.exp(-((X - 0.5) ** 2 + (Y - 0.45) ** 2 + (Z - 0.55) ** 2) / 0.03) * box16.mask
    return Potential(box16, v, provenance="gaussian")
