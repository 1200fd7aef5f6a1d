import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mcscan.config import (default_config, make_calibration, make_image_spec,
                           make_phantom, zero_noise)

settings.register_profile(
    "ci", derandomize=True, deadline=None,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation matrix via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_transform(rng: np.random.Generator, scale: float = 100.0):
    from mcscan.geometry import RigidTransform
    return RigidTransform(random_rotation(rng),
                          scale * rng.uniform(-1.0, 1.0, size=3))


@pytest.fixture(scope="session")
def cfg():
    return default_config()


@pytest.fixture(scope="session")
def quiet_cfg():
    return zero_noise(default_config())


@pytest.fixture(scope="session")
def phantom(cfg):
    return make_phantom(cfg.phantom)


@pytest.fixture(scope="session")
def image_spec(cfg):
    return make_image_spec(cfg.imaging)


@pytest.fixture(scope="session")
def calibration(cfg):
    return make_calibration(cfg.imaging)
