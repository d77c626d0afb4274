"""Rigid-body transforms and the 6-dof pose residual.

Conventions used across the package:

* Quaternions are unit-norm, scalar-first ``[w, x, y, z]`` float64 arrays.
* A :class:`Pose` maps world-frame points into its local frame:
  ``x_local = R @ x_world + t`` (the ``^cT_w`` convention for camera poses,
  ``^pT_w`` for vehicle/prior poses).
* Local increments on the pose manifold are 6-vectors ``[dtheta, dt]``
  applied on the right: ``R <- R @ exp([dtheta]x)``, ``t <- t + dt``.
  All Jacobians in this module are with respect to these increments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Pose",
    "RigExtrinsics",
    "ResidualWeights",
    "quat_multiply",
    "quat_conjugate",
    "quat_to_matrix",
    "matrix_to_quat",
    "quat_from_rotvec",
    "rotvec_from_quat",
    "rotation_angle",
    "skew",
    "compose",
    "inverse",
    "relative",
    "retract",
    "local_delta",
    "compose_jacobians",
    "inverse_jacobian",
    "nav_to_camera_prior",
    "pose_residual",
    "pose_residual_jacobians",
]

_EPS = 1e-12


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: ``skew(a) @ b == cross(a, b)``."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def quat_multiply(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    pw, px, py, pz = p
    qw, qx, qy, qz = q
    return np.array(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (Shepperd's branch selection)."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return q / np.linalg.norm(q)


def quat_from_rotvec(rv: np.ndarray) -> np.ndarray:
    """Exponential map: rotation vector (axis * angle) to quaternion."""
    rv = np.asarray(rv, dtype=float)
    angle = np.linalg.norm(rv)
    if angle < 1e-10:
        # second-order series keeps the map smooth through zero
        half = 0.5 - angle * angle / 48.0
        q = np.concatenate(([1.0 - angle * angle / 8.0], half * rv))
    else:
        half_angle = 0.5 * angle
        q = np.concatenate(([np.cos(half_angle)], np.sin(half_angle) * rv / angle))
    return q / np.linalg.norm(q)


def rotvec_from_quat(q: np.ndarray) -> np.ndarray:
    """Logarithm map: quaternion to rotation vector."""
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    vec_norm = np.linalg.norm(q[1:])
    if vec_norm < 1e-10:
        # sin(a/2) ~ a/2 for small angles
        return 2.0 * q[1:] / max(q[0], _EPS)
    angle = 2.0 * np.arctan2(vec_norm, q[0])
    return q[1:] * (angle / vec_norm)


def rotation_angle(q: np.ndarray) -> float:
    """Absolute rotation angle in radians encoded by a unit quaternion."""
    return float(2.0 * np.arctan2(np.linalg.norm(q[1:]), abs(q[0])))


def _quat_left_matrix(q: np.ndarray) -> np.ndarray:
    """Matrix L with q (x) p == L(q) @ p for scalar-first quaternions."""
    w, x, y, z = q
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, -z, y],
            [y, z, w, -x],
            [z, -y, x, w],
        ]
    )


def _quat_right_matrix(q: np.ndarray) -> np.ndarray:
    """Matrix Rm with p (x) q == Rm(q) @ p."""
    w, x, y, z = q
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, z, -y],
            [y, -z, w, x],
            [z, y, -x, w],
        ]
    )


@dataclass
class Pose:
    """Rigid transform mapping world points into the local frame.

    Attributes:
        q: unit quaternion, scalar-first ``[w, x, y, z]``.
        t: translation, meters. ``x_local = R(q) @ x_world + t``.
    """

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        q = np.asarray(self.q, dtype=float).reshape(4).copy()
        t = np.asarray(self.t, dtype=float).reshape(3).copy()
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValueError("pose components must be finite")
        norm = np.linalg.norm(q)
        if norm < 1e-6:
            raise ValueError("quaternion norm too small to normalize")
        self.q = q / norm
        self.t = t

    # -- constructors -------------------------------------------------

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray) -> "Pose":
        return cls(matrix_to_quat(R), np.asarray(t, dtype=float))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls.from_rt(T[:3, :3], T[:3, 3])

    # -- accessors ----------------------------------------------------

    def rotation(self) -> np.ndarray:
        """3x3 rotation matrix ``R`` with ``x_local = R x_world + t``."""
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous transform."""
        T = np.eye(4)
        T[:3, :3] = self.rotation()
        T[:3, 3] = self.t
        return T

    def center(self) -> np.ndarray:
        """Origin of the local frame expressed in world coordinates."""
        return -self.rotation().T @ self.t

    # -- algebra ------------------------------------------------------

    def compose(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return inverse(self)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map world points (3,) or (n, 3) into the local frame."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation().T + self.t

    def copy(self) -> "Pose":
        return Pose(self.q.copy(), self.t.copy())

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        q = np.array2string(self.q, precision=6, suppress_small=True)
        t = np.array2string(self.t, precision=6, suppress_small=True)
        return f"Pose(q={q}, t={t})"


@dataclass
class RigExtrinsics:
    """Camera-to-vehicle-body offset ``^pT_c``."""

    transform: Pose = field(default_factory=Pose.identity)

    @classmethod
    def identity(cls) -> "RigExtrinsics":
        return cls(Pose.identity())


@dataclass
class ResidualWeights:
    """Symmetric PSD weighting of the 6-dof pose residual (rho_r, rho_t)."""

    rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    trans: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self) -> None:
        self.rot = np.asarray(self.rot, dtype=float).reshape(3, 3)
        self.trans = np.asarray(self.trans, dtype=float).reshape(3, 3)
        for name, m in (("rot", self.rot), ("trans", self.trans)):
            if not np.allclose(m, m.T, atol=1e-12):
                raise ValueError(f"{name} weight must be symmetric")
            eigvals = np.linalg.eigvalsh(m)
            if eigvals.min() < -1e-12:
                raise ValueError(f"{name} weight must be positive semi-definite")

    @classmethod
    def identity(cls) -> "ResidualWeights":
        return cls()

    @classmethod
    def isotropic(cls, rot_weight: float, trans_weight: float) -> "ResidualWeights":
        return cls(rot_weight * np.eye(3), trans_weight * np.eye(3))


def compose(a: Pose, b: Pose) -> Pose:
    """Composition ``a o b``: maps a point through ``b`` then ``a``."""
    q = quat_multiply(a.q, b.q)
    t = quat_to_matrix(a.q) @ b.t + a.t
    return Pose(q, t)


def inverse(a: Pose) -> Pose:
    Rt = quat_to_matrix(a.q).T
    return Pose(quat_conjugate(a.q), -Rt @ a.t)


def relative(a: Pose, b: Pose) -> Pose:
    """Transform from frame ``a`` to frame ``b``: ``^bT_a = b o a^-1``."""
    return compose(b, inverse(a))


def retract(pose: Pose, delta: np.ndarray) -> Pose:
    """Apply a local increment ``[dtheta, dt]`` on the right."""
    delta = np.asarray(delta, dtype=float).reshape(6)
    q = quat_multiply(pose.q, quat_from_rotvec(delta[:3]))
    return Pose(q, pose.t + delta[3:])


def local_delta(a: Pose, b: Pose) -> np.ndarray:
    """Increment with ``retract(a, delta) == b`` (log of a^-1 b on rotation)."""
    dq = quat_multiply(quat_conjugate(a.q), b.q)
    return np.concatenate([rotvec_from_quat(dq), b.t - a.t])


def compose_jacobians(a: Pose, b: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of the local increment of ``compose(a, b)`` w.r.t. a and b."""
    Ra = quat_to_matrix(a.q)
    Rb = quat_to_matrix(b.q)
    Ja = np.zeros((6, 6))
    Ja[:3, :3] = Rb.T
    Ja[3:, :3] = -Ra @ skew(b.t)
    Ja[3:, 3:] = np.eye(3)
    Jb = np.zeros((6, 6))
    Jb[:3, :3] = np.eye(3)
    Jb[3:, 3:] = Ra
    return Ja, Jb


def inverse_jacobian(a: Pose) -> np.ndarray:
    """Jacobian of the local increment of ``inverse(a)`` w.r.t. a."""
    Ra = quat_to_matrix(a.q)
    J = np.zeros((6, 6))
    J[:3, :3] = -Ra
    J[3:, :3] = -skew(Ra.T @ a.t)
    J[3:, 3:] = -Ra.T
    return J


def nav_to_camera_prior(nav_pose: Pose, rig: RigExtrinsics) -> Pose:
    """Camera-frame prior from a vehicle-frame pose: ``(^pT_c)^-1 o ^pT_w``."""
    return compose(inverse(rig.transform), nav_pose)


def _residual_from_relative(rel: Pose, w: ResidualWeights) -> tuple[np.ndarray, np.ndarray, float]:
    """Residual of a relative pose plus its Jacobian w.r.t. the relative increment."""
    q = rel.q
    sign = -1.0 if q[0] < 0 else 1.0
    q = sign * q
    r = np.empty(6)
    r[:3] = w.rot @ (2.0 * q[1:])
    r[3:] = w.trans @ rel.t
    J = np.zeros((6, 6))
    # d vec(q (x) dq)/d dtheta = 0.5 (w I + [v]x); the factor 2 cancels the 0.5
    J[:3, :3] = w.rot @ (q[0] * np.eye(3) + skew(q[1:]))
    J[3:, 3:] = w.trans
    return r, J, sign


def pose_residual(a: Pose, b: Pose, w: ResidualWeights | None = None) -> np.ndarray:
    """6-dof residual ``[rho_r 2 vec(q_rel); rho_t t_rel]`` of relative(a, b).

    The relative quaternion sign is fixed so its scalar part is >= 0,
    keeping the residual continuous near identity.
    """
    if w is None:
        w = ResidualWeights.identity()
    r, _, _ = _residual_from_relative(relative(a, b), w)
    return r


def pose_residual_jacobians(
    a: Pose, b: Pose, w: ResidualWeights | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual plus Jacobians w.r.t. local increments of both poses."""
    if w is None:
        w = ResidualWeights.identity()
    inv_a = inverse(a)
    rel = compose(b, inv_a)
    J_rel_b, J_rel_inva = compose_jacobians(b, inv_a)
    J_rel_a = J_rel_inva @ inverse_jacobian(a)
    r, J_front, _ = _residual_from_relative(rel, w)
    return r, J_front @ J_rel_a, J_front @ J_rel_b
