import numpy as np
import pytest

from qpsim import mesh as meshmod
from qpsim import sdf as sdfmod


@pytest.fixture(scope="session")
def cube_grid():
    """Side-1 cube centered at the origin, sampled at 32 nodes per axis."""
    m = meshmod.make_box([0.5, 0.5, 0.5])
    return sdfmod.build_sdf_grid(m, resolution=32)


@pytest.fixture(scope="session")
def sphere_grid():
    """Unit sphere (icosphere, 3 subdivisions) at 32 nodes per axis."""
    m = meshmod.make_icosphere(1.0, subdivisions=3)
    return sdfmod.build_sdf_grid(m, resolution=32)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
