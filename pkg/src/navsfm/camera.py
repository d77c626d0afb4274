"""Equidistant fisheye camera model with polynomial distortion.

Projection of a camera-frame point ``(x, y, z)``, ``z > 0``:

    r = sqrt(x^2 + y^2),  theta = atan2(r, z)
    theta_d = theta * (1 + k1 theta^2 + k2 theta^4 + k3 theta^6 + k4 theta^8)
    u = theta_d * x / r,  v = theta_d * y / r
    pixel = (fx * u + cx, fy * v + cy)

Points with ``z <= 0`` are behind the sensor plane and produce an explicit
invalid flag — never an extrapolated pixel.  Unprojection inverts the
distortion polynomial with Newton iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, skew

__all__ = ["CameraIntrinsics", "project", "project_batch", "project_jacobians", "unproject"]

# below this radius/z ratio the model is numerically a pinhole at the axis
_AXIS_EPS = 1e-9

N_INTRINSIC_PARAMS = 8  # fx, fy, cx, cy, k1..k4


@dataclass
class CameraIntrinsics:
    """Pixel-space intrinsics for the fisheye model."""

    fx: float
    fy: float
    cx: float
    cy: float
    k: np.ndarray = field(default_factory=lambda: np.zeros(4))
    width: int = 1024
    height: int = 1024

    def __post_init__(self) -> None:
        self.k = np.asarray(self.k, dtype=float).reshape(4).copy()
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def param_vector(self) -> np.ndarray:
        """Stacked refinable parameters [fx, fy, cx, cy, k1..k4]."""
        return np.concatenate([[self.fx, self.fy, self.cx, self.cy], self.k])

    def with_params(self, params: np.ndarray) -> "CameraIntrinsics":
        params = np.asarray(params, dtype=float).reshape(N_INTRINSIC_PARAMS)
        return CameraIntrinsics(
            fx=float(params[0]),
            fy=float(params[1]),
            cx=float(params[2]),
            cy=float(params[3]),
            k=params[4:8],
            width=self.width,
            height=self.height,
        )

    def copy(self) -> "CameraIntrinsics":
        return self.with_params(self.param_vector())


def _distort(theta: np.ndarray, k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """theta_d and its derivative d theta_d / d theta."""
    t2 = theta * theta
    theta_d = theta * (1.0 + t2 * (k[0] + t2 * (k[1] + t2 * (k[2] + t2 * k[3]))))
    ddt = 1.0 + t2 * (3.0 * k[0] + t2 * (5.0 * k[1] + t2 * (7.0 * k[2] + t2 * 9.0 * k[3])))
    return theta_d, ddt


def project_camera_frame(points_cam: np.ndarray, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project camera-frame points.

    Args:
        points_cam: (n, 3) camera-frame coordinates.
        K: intrinsics.

    Returns:
        (pixels (n, 2), valid (n,)): ``valid`` is False where z <= 0; the
        corresponding pixel rows are NaN.
    """
    pts = np.atleast_2d(np.asarray(points_cam, dtype=float))
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    valid = z > 0
    r = np.hypot(x, y)
    safe_z = np.where(valid, z, 1.0)
    theta = np.arctan2(r, safe_z)
    theta_d, _ = _distort(theta, K.k)
    on_axis = r < _AXIS_EPS * np.abs(safe_z)
    safe_r = np.where(on_axis, 1.0, r)
    u = np.where(on_axis, x / safe_z, theta_d * x / safe_r)
    v = np.where(on_axis, y / safe_z, theta_d * y / safe_r)
    pixels = np.column_stack([K.fx * u + K.cx, K.fy * v + K.cy])
    pixels[~valid] = np.nan
    return pixels, valid


def project_camera_frame_jacobians(
    points_cam: np.ndarray, K: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Projection plus Jacobians w.r.t. camera-frame point and intrinsics.

    Returns:
        pixels (n, 2), valid (n,), J_point (n, 2, 3), J_intr (n, 2, 8).
    """
    pts = np.atleast_2d(np.asarray(points_cam, dtype=float))
    n = pts.shape[0]
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    valid = z > 0
    safe_z = np.where(valid, z, 1.0)
    r = np.hypot(x, y)
    on_axis = r < _AXIS_EPS * np.abs(safe_z)
    safe_r = np.where(on_axis, 1.0, r)
    d = r * r + safe_z * safe_z
    theta = np.arctan2(r, safe_z)
    theta_d, ddt = _distort(theta, K.k)

    psi = np.where(on_axis, 1.0 / safe_z, theta_d / safe_r)
    u = np.where(on_axis, x / safe_z, psi * x)
    v = np.where(on_axis, y / safe_z, psi * y)

    # radial branch
    diff = ddt * safe_z / d - theta_d / safe_r  # A - B
    du_dx = psi + x * x * diff / (safe_r * safe_r)
    du_dy = x * y * diff / (safe_r * safe_r)
    du_dz = -x * ddt / d
    dv_dy = psi + y * y * diff / (safe_r * safe_r)
    dv_dz = -y * ddt / d

    # axis limit is an undistorted pinhole
    du_dx = np.where(on_axis, 1.0 / safe_z, du_dx)
    du_dy = np.where(on_axis, 0.0, du_dy)
    du_dz = np.where(on_axis, -x / (safe_z * safe_z), du_dz)
    dv_dy = np.where(on_axis, 1.0 / safe_z, dv_dy)
    dv_dz = np.where(on_axis, -y / (safe_z * safe_z), dv_dz)

    J_point = np.empty((n, 2, 3))
    J_point[:, 0, 0] = K.fx * du_dx
    J_point[:, 0, 1] = K.fx * du_dy
    J_point[:, 0, 2] = K.fx * du_dz
    J_point[:, 1, 0] = K.fy * du_dy
    J_point[:, 1, 1] = K.fy * dv_dy
    J_point[:, 1, 2] = K.fy * dv_dz

    J_intr = np.zeros((n, 2, N_INTRINSIC_PARAMS))
    J_intr[:, 0, 0] = u
    J_intr[:, 1, 1] = v
    J_intr[:, 0, 2] = 1.0
    J_intr[:, 1, 3] = 1.0
    theta_pow = theta ** 3
    ratio_x = np.where(on_axis, 0.0, x / safe_r)
    ratio_y = np.where(on_axis, 0.0, y / safe_r)
    for i in range(4):
        J_intr[:, 0, 4 + i] = K.fx * ratio_x * theta_pow
        J_intr[:, 1, 4 + i] = K.fy * ratio_y * theta_pow
        theta_pow = theta_pow * theta * theta

    pixels = np.column_stack([K.fx * u + K.cx, K.fy * v + K.cy])
    pixels[~valid] = np.nan
    J_point[~valid] = 0.0
    J_intr[~valid] = 0.0
    return pixels, valid, J_point, J_intr


def project(point: np.ndarray, K: CameraIntrinsics, T: Pose) -> np.ndarray | None:
    """Project a world point; returns None for behind-camera points."""
    pix, valid = project_batch(np.asarray(point, dtype=float).reshape(1, 3), K, T)
    if not valid[0]:
        return None
    return pix[0]


def project_batch(
    points: np.ndarray, K: CameraIntrinsics, T: Pose
) -> tuple[np.ndarray, np.ndarray]:
    """Project world points (n, 3) through pose T."""
    return project_camera_frame(T.transform(points), K)


def project_jacobians(
    point: np.ndarray, K: CameraIntrinsics, T: Pose
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray, np.ndarray]:
    """Pixel plus Jacobians w.r.t. pose increment, world point, intrinsics.

    Returns:
        (pixel or None, J_pose (2, 6), J_point (2, 3), J_intr (2, 8)).
        Jacobians are zero when the point is behind the camera.
    """
    point = np.asarray(point, dtype=float).reshape(3)
    R = T.rotation()
    x_cam = R @ point + T.t
    pix, valid, J_xc, J_intr = project_camera_frame_jacobians(x_cam.reshape(1, 3), K)
    J_xc = J_xc[0]
    J_pose = np.zeros((2, 6))
    J_pose[:, :3] = J_xc @ (-R @ skew(point))
    J_pose[:, 3:] = J_xc
    if not valid[0]:
        return None, np.zeros((2, 6)), np.zeros((2, 3)), np.zeros((2, N_INTRINSIC_PARAMS))
    return pix[0], J_pose, J_xc @ R, J_intr[0]


def undistort_angles(theta_d: np.ndarray, k: np.ndarray, iterations: int = 25) -> np.ndarray:
    """Invert theta -> theta_d with Newton's method (vectorized)."""
    theta = np.array(theta_d, dtype=float, copy=True)
    for _ in range(iterations):
        f, df = _distort(theta, k)
        step = (f - theta_d) / df
        theta = theta - step
        if np.max(np.abs(step)) < 1e-15:
            break
    return theta


def unproject(pixels: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Pixels (n, 2) or (2,) to unit rays in the camera frame."""
    pix = np.atleast_2d(np.asarray(pixels, dtype=float))
    u = (pix[:, 0] - K.cx) / K.fx
    v = (pix[:, 1] - K.cy) / K.fy
    theta_d = np.hypot(u, v)
    theta = undistort_angles(theta_d, K.k)
    on_axis = theta_d < 1e-12
    safe_d = np.where(on_axis, 1.0, theta_d)
    scale = np.where(on_axis, 0.0, np.sin(theta) / safe_d)
    rays = np.column_stack([u * scale, v * scale, np.cos(theta)])
    if np.asarray(pixels).ndim == 1:
        return rays[0]
    return rays
