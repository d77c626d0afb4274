"""Multi-view triangulation: linear midpoint initialization + reprojection refinement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics, project_camera_frame, project_camera_frame_jacobians, unproject
from .geometry import Pose

__all__ = ["TriangulationResult", "triangulate"]

OK = "ok"
DEGENERATE_ANGLE = "degenerate_angle"
BEHIND_CAMERA = "behind_camera"
ILL_CONDITIONED = "ill_conditioned"


@dataclass
class TriangulationResult:
    point: np.ndarray | None
    status: str
    max_angle_deg: float
    in_front: np.ndarray  # per-observation cheirality flags
    mean_reproj_px: float = float("nan")

    @property
    def ok(self) -> bool:
        return self.status == OK


def _ray_directions(poses: list[Pose], Ks: list[CameraIntrinsics], pixels: np.ndarray):
    dirs = np.empty((len(poses), 3))
    centers = np.empty((len(poses), 3))
    for i, (T, K) in enumerate(zip(poses, Ks)):
        d_cam = unproject(pixels[i], K)
        dirs[i] = T.rotation().T @ d_cam
        centers[i] = T.center()
    return dirs, centers


def _max_pairwise_angle_deg(dirs: np.ndarray) -> float:
    dots = np.clip(dirs @ dirs.T, -1.0, 1.0)
    iu = np.triu_indices(len(dirs), k=1)
    if iu[0].size == 0:
        return 0.0
    return float(np.degrees(np.max(np.arccos(dots[iu]))))


def _midpoint(dirs: np.ndarray, centers: np.ndarray) -> np.ndarray | None:
    # sum of (I - d d^T) projectors: least-squares point closest to all rays
    A = len(dirs) * np.eye(3) - dirs.T @ dirs
    proj = np.eye(3)[None] - dirs[:, :, None] * dirs[:, None, :]
    b = np.einsum("nij,nj->i", proj, centers)
    try:
        sol = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(sol)):
        return None
    return sol


def _refine(
    point: np.ndarray,
    poses: list[Pose],
    Ks: list[CameraIntrinsics],
    pixels: np.ndarray,
    iterations: int = 10,
) -> np.ndarray:
    Rs = np.stack([T.rotation() for T in poses])
    ts = np.stack([T.t for T in poses])
    X = point.copy()
    lam = 0.0
    prev_cost = None
    for _ in range(iterations):
        pts_cam = Rs @ X + ts
        best_rows = []
        J_rows = []
        res = []
        for i, K in enumerate(Ks):
            pix, valid, J_pt, _ = project_camera_frame_jacobians(pts_cam[i : i + 1], K)
            if not valid[0]:
                continue
            res.append(pix[0] - pixels[i])
            J_rows.append(J_pt[0] @ Rs[i])
        if len(res) < 2:
            break
        r = np.concatenate(res)
        J = np.vstack(J_rows)
        cost = float(r @ r)
        g = J.T @ r
        H = J.T @ J
        try:
            step = np.linalg.solve(H + lam * np.diag(np.diag(H)), -g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        X_new = X + step
        if prev_cost is not None and cost > prev_cost * (1 + 1e-12):
            lam = max(lam * 10.0, 1e-6)
        else:
            lam = lam / 10.0 if lam > 1e-12 else 0.0
        prev_cost = cost
        X = X_new
        if np.linalg.norm(step) < 1e-13 * max(1.0, np.linalg.norm(X)):
            break
    return X


def triangulate(
    observations: list[tuple[Pose, CameraIntrinsics, np.ndarray]],
    min_angle_deg: float = 1.0,
) -> TriangulationResult:
    """Triangulate one track.

    Args:
        observations: list of (pose, intrinsics, pixel) with >= 2 entries.
        min_angle_deg: minimum max-pairwise-ray-angle below which the
            geometry is declared degenerate.

    Returns:
        TriangulationResult; ``point`` is None unless status is "ok".
    """
    if len(observations) < 2:
        raise ValueError("triangulation needs at least two observations")
    poses = [obs[0] for obs in observations]
    Ks = [obs[1] for obs in observations]
    pixels = np.asarray([obs[2] for obs in observations], dtype=float)

    dirs, centers = _ray_directions(poses, Ks, pixels)
    max_angle = _max_pairwise_angle_deg(dirs)
    in_front = np.zeros(len(poses), dtype=bool)
    if max_angle < min_angle_deg:
        return TriangulationResult(None, DEGENERATE_ANGLE, max_angle, in_front)

    X = _midpoint(dirs, centers)
    if X is None:
        return TriangulationResult(None, ILL_CONDITIONED, max_angle, in_front)
    X = _refine(X, poses, Ks, pixels)

    residuals = []
    for i, (T, K) in enumerate(zip(poses, Ks)):
        pt_cam = T.transform(X)
        in_front[i] = pt_cam[2] > 0
        if in_front[i]:
            pix, valid = project_camera_frame(pt_cam.reshape(1, 3), K)
            if valid[0]:
                residuals.append(np.linalg.norm(pix[0] - pixels[i]))
    if not np.all(in_front):
        return TriangulationResult(None, BEHIND_CAMERA, max_angle, in_front)
    mean_err = float(np.mean(residuals)) if residuals else float("nan")
    return TriangulationResult(X, OK, max_angle, in_front, mean_err)
