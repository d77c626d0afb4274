"""Navigation-aided hierarchical structure-from-motion for seafloor surveys."""

from .camera import CameraIntrinsics, project, project_batch, unproject
from .geometry import (
    Pose,
    ResidualWeights,
    RigExtrinsics,
    compose,
    inverse,
    nav_to_camera_prior,
    pose_residual,
    relative,
)
from .triangulation import TriangulationResult, triangulate

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "Pose",
    "ResidualWeights",
    "RigExtrinsics",
    "TriangulationResult",
    "compose",
    "inverse",
    "nav_to_camera_prior",
    "pose_residual",
    "project",
    "project_batch",
    "relative",
    "triangulate",
    "unproject",
]
