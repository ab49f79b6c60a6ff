import numpy as np
import pytest

from duocap.body import default_template
from duocap.geometry import CameraRig
from duocap.simulate import make_rig


@pytest.fixture(scope="session")
def small_template():
    """Shared low-resolution body template (surface sampling is the only
    thing the resolution changes)."""
    return default_template(256)


@pytest.fixture(scope="session")
def full_template():
    return default_template(1024)


def ring_rig(count: int = 8) -> CameraRig:
    """Standard test rig: cameras on a circle looking at the origin."""
    return make_rig(camera_count=count)


def random_rotation(rng) -> np.ndarray:
    """Uniform-ish random rotation via QR with sign fix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
