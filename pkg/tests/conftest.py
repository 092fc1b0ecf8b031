import numpy as np
import pytest

from hpscatter.em_operator import Medium
from hpscatter.geometry import build_rwg, make_cube, make_geodesic_sphere, make_plate


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance-scale tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(20240617)


@pytest.fixture(scope="session")
def medium():
    # 300 MHz, wavelength just under 1 m
    return Medium.free_space(300e6)


@pytest.fixture(scope="session")
def plate_mesh():
    return make_plate(1.0, 2)


@pytest.fixture(scope="session")
def cube_mesh():
    return make_cube(0.3, 2)


@pytest.fixture(scope="session")
def small_sphere():
    return make_geodesic_sphere(0.3, 2)


@pytest.fixture(scope="session")
def cube_basis(cube_mesh):
    return build_rwg(cube_mesh)


@pytest.fixture(scope="session")
def sphere_basis(small_sphere):
    return build_rwg(small_sphere)


def random_complex(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
