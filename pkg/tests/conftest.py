import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from navsfm.camera import CameraIntrinsics
from navsfm.geometry import Pose, quat_from_rotvec

settings.register_profile(
    "default",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def random_pose(rng: np.random.Generator, trans_scale: float = 5.0, max_angle: float = 2.5) -> Pose:
    """Uniform-ish random pose with rotation angle bounded away from pi."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return Pose(quat_from_rotvec(axis * angle), rng.normal(scale=trans_scale, size=3))


def default_intrinsics(distorted: bool = True) -> CameraIntrinsics:
    k = np.array([-0.012, 0.003, -0.0008, 0.0002]) if distorted else np.zeros(4)
    return CameraIntrinsics(fx=600.0, fy=600.0, cx=511.5, cy=511.5, k=k, width=1024, height=1024)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20260816)
