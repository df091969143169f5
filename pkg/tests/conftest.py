import numpy as np
import pytest

from dynhuman import geometry


@pytest.fixture(scope="session")
def body():
    return geometry.procedural_body()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_frame(body, rng, scale=0.3):
    theta = rng.normal(scale=scale, size=(body.n_joints, 3))
    beta = rng.normal(scale=0.5, size=body.n_blendshapes)
    return geometry.PoseFrame(theta, beta, np.array([32.0, 32.0, 20.0]))
