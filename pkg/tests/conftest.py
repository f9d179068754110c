import numpy as np
import pytest

from geoflow import metrics as M

AXES = (1.0, 1.2, 1.4)


@pytest.fixture(scope="session")
def sphere():
    return M.round_sphere(1.0)


@pytest.fixture(scope="session")
def torus():
    return M.flat_torus()


@pytest.fixture(scope="session")
def ellipsoid():
    return M.ellipsoid(*AXES)


@pytest.fixture(scope="session")
def paternain():
    return M.paternain(*AXES, eps=0.05)


@pytest.fixture(scope="session")
def builtins(sphere, torus, ellipsoid, paternain):
    return {"sphere": sphere, "torus": torus, "ellipsoid": ellipsoid, "paternain": paternain}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_unit_states(metric, n, rng):
    c, u = metric.sample_points(n, rng)
    ang = rng.uniform(0, 2 * np.pi, n)
    e1, e2 = metric.frame(c, u)
    v = np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2
    return c, u, v
