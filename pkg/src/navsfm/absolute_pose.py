"""Absolute camera pose from 2D-3D correspondences.

Minimal three-point resection (Grunert's distance formulation), a RANSAC
loop over bearing-ray correspondences, and a Gauss-Newton refinement on
the inlier set.  Residuals are angular throughout so the same thresholds
work across the full fisheye field of view.
"""

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as npoly

from .geometry import Pose, retract

__all__ = [
    "AbsolutePose",
    "absolute_angular_residuals",
    "p3p_solutions",
    "ransac_pnp",
    "refine_absolute_pose",
    "rigid_align",
]


def rigid_align(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rigid transform with dst ≈ R @ src + t (Kabsch)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return Pose.from_rt(R, cd - R @ cs)


def p3p_solutions(points: np.ndarray, rays: np.ndarray) -> list[Pose]:
    """All physically valid camera poses seeing three world points along
    three bearing rays.

    points: (3, 3) world coordinates; rays: (3, 3) unit bearing vectors in
    the camera frame.  Returns up to four world-to-camera poses; an empty
    list when the points are (near-)collinear or no positive-depth solution
    exists.
    """
    X = np.asarray(points, dtype=np.float64)
    x = np.asarray(rays, dtype=np.float64)
    x = x / np.linalg.norm(x, axis=1, keepdims=True)

    a = np.linalg.norm(X[1] - X[2])
    b = np.linalg.norm(X[0] - X[2])
    c = np.linalg.norm(X[0] - X[1])
    scale = max(a, b, c)
    if scale < 1e-12 or min(a, b, c) < 1e-9 * scale:
        return []
    tri = np.cross(X[1] - X[0], X[2] - X[0])
    if np.linalg.norm(tri) < 1e-9 * scale * scale:
        return []

    cos_a = float(x[1] @ x[2])
    cos_b = float(x[0] @ x[2])
    cos_c = float(x[0] @ x[1])
    if max(abs(cos_a), abs(cos_b), abs(cos_c)) > 1.0 - 1e-12:
        return []

    ab = (a / b) ** 2
    cb = (c / b) ** 2

    # With depth ratios u = s2/s1, v = s3/s1 the law-of-cosines system
    # reduces to a quartic in v; u follows rationally as N(v)/D(v).
    K = np.array([1.0, -2.0 * cos_b, 1.0])  # 1 + v^2 - 2 v cos_b
    N = npoly.polyadd(np.array([1.0, 0.0, -1.0]), (ab - cb) * K)
    D = np.array([2.0 * cos_c, -2.0 * cos_a])
    quartic = npoly.polyadd(
        npoly.polyadd(npoly.polymul(N, N), -2.0 * cos_c * npoly.polymul(N, D)),
        npoly.polymul(npoly.polymul(D, D), npoly.polyadd(np.array([1.0]), -cb * K)),
    )
    if np.abs(quartic).max() < 1e-14:
        return []
    roots = npoly.polyroots(quartic)

    poses: list[Pose] = []
    for root in roots:
        if abs(root.imag) > 1e-8 * max(1.0, abs(root.real)):
            continue
        v = float(root.real)
        if v <= 0.0:
            continue
        denom = float(npoly.polyval(v, D))
        if abs(denom) < 1e-12:
            continue
        u = float(npoly.polyval(v, N)) / denom
        if u <= 0.0:
            continue
        k = float(npoly.polyval(v, K))
        if k <= 0.0:
            continue
        s1 = b / np.sqrt(k)
        depths = np.array([s1, u * s1, v * s1])
        cam_pts = depths[:, None] * x
        pose = rigid_align(X, cam_pts)
        poses.append(pose)
    return poses


def absolute_angular_residuals(pose: Pose, points: np.ndarray, rays: np.ndarray) -> np.ndarray:
    """Angle between each observed ray and the predicted direction of its
    world point in the camera frame.  Points behind the camera land near pi.
    """
    pred = pose.transform(np.asarray(points, dtype=np.float64))
    norms = np.linalg.norm(pred, axis=1)
    norms = np.where(norms < 1e-12, 1.0, norms)
    pred = pred / norms[:, None]
    obs = np.asarray(rays, dtype=np.float64)
    obs = obs / np.linalg.norm(obs, axis=1, keepdims=True)
    dots = np.einsum("ij,ij->i", obs, pred)
    crosses = np.linalg.norm(np.cross(obs, pred), axis=1)
    return np.arctan2(crosses, dots)


def _tangent_residuals_and_jacobian(
    pose: Pose, points: np.ndarray, rays: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked 2-dof tangent-plane residuals and their Jacobian w.r.t. the
    right pose perturbation [dtheta, dt]."""
    n = len(points)
    R = pose.rotation()
    y = points @ R.T + pose.t
    ny = np.linalg.norm(y, axis=1)
    ny = np.where(ny < 1e-12, 1.0, ny)
    yh = y / ny[:, None]

    # tangent basis orthogonal to each observed ray
    ref = np.zeros_like(rays)
    for i in range(n):
        ref[i, np.argmin(np.abs(rays[i]))] = 1.0
    b1 = np.cross(rays, ref)
    b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
    b2 = np.cross(rays, b1)

    res = np.empty(2 * n)
    jac = np.zeros((2 * n, 6))
    for i in range(n):
        P = np.stack([b1[i], b2[i]])  # (2, 3)
        res[2 * i : 2 * i + 2] = P @ yh[i]
        dnorm = (np.eye(3) - np.outer(yh[i], yh[i])) / ny[i]
        dtheta = -R @ _skew(points[i])
        block = P @ dnorm
        jac[2 * i : 2 * i + 2, :3] = block @ dtheta
        jac[2 * i : 2 * i + 2, 3:] = block
    return res, jac


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def refine_absolute_pose(
    pose: Pose,
    points: np.ndarray,
    rays: np.ndarray,
    max_iterations: int = 10,
) -> Pose:
    """Gauss-Newton polish of a pose on its 2D-3D support set."""
    points = np.asarray(points, dtype=np.float64)
    rays = np.asarray(rays, dtype=np.float64)
    rays = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    best = pose
    best_cost = float(np.sum(_tangent_residuals_and_jacobian(pose, points, rays)[0] ** 2))
    current = pose
    for _ in range(max_iterations):
        res, jac = _tangent_residuals_and_jacobian(current, points, rays)
        g = jac.T @ res
        H = jac.T @ jac
        H[np.diag_indices_from(H)] += 1e-12
        try:
            delta = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            break
        current = retract(current, delta)
        cost = float(np.sum(_tangent_residuals_and_jacobian(current, points, rays)[0] ** 2))
        if cost < best_cost:
            best_cost = cost
            best = current
        if np.linalg.norm(delta) < 1e-14:
            break
    return best


@dataclass
class AbsolutePose:
    """Verified absolute pose: world-to-camera transform plus inlier data."""

    pose: Pose
    inlier_mask: np.ndarray
    n_inliers: int
    residual_rad: float


def ransac_pnp(
    points: np.ndarray,
    rays: np.ndarray,
    *,
    threshold_rad: float = 2e-3,
    confidence: float = 0.999,
    max_iterations: int = 1000,
    min_inliers: int = 6,
    seed: int = 0,
    refine: bool = True,
) -> AbsolutePose | None:
    """Robust camera resection from bearing-ray / world-point matches.

    Samples minimal triples, scores every candidate pose on all
    correspondences by angular residual, and polishes the winner on its
    inliers.  Returns None when no pose reaches ``min_inliers`` support.
    """
    points = np.asarray(points, dtype=np.float64)
    rays = np.asarray(rays, dtype=np.float64)
    n = len(points)
    if n < max(min_inliers, 3):
        return None
    rays = rays / np.linalg.norm(rays, axis=1, keepdims=True)

    rng = np.random.Generator(np.random.Philox(seed))
    best_mask: np.ndarray | None = None
    best_count = 0
    best_pose: Pose | None = None
    needed = max_iterations
    it = 0
    while it < needed and it < max_iterations:
        it += 1
        idx = rng.choice(n, size=3, replace=False)
        for cand in p3p_solutions(points[idx], rays[idx]):
            res = absolute_angular_residuals(cand, points, rays)
            mask = res < threshold_rad
            count = int(mask.sum())
            if count > best_count:
                best_count = count
                best_mask = mask
                best_pose = cand
                ratio = count / n
                if ratio >= 1.0:
                    needed = it
                else:
                    denom = np.log(max(1.0 - ratio**3, 1e-12))
                    needed = min(
                        max_iterations,
                        int(np.ceil(np.log(1.0 - confidence) / denom)),
                    )

    if best_pose is None or best_count < max(min_inliers, 3):
        return None

    if refine and best_count >= 3:
        polished = refine_absolute_pose(best_pose, points[best_mask], rays[best_mask])
        res = absolute_angular_residuals(polished, points, rays)
        mask = res < threshold_rad
        if int(mask.sum()) >= best_count:
            best_pose = polished
            best_mask = mask
            best_count = int(mask.sum())

    res = absolute_angular_residuals(best_pose, points, rays)
    residual = float(np.sqrt(np.mean(res[best_mask] ** 2))) if best_count else float("inf")
    return AbsolutePose(
        pose=best_pose,
        inlier_mask=best_mask,
        n_inliers=best_count,
        residual_rad=residual,
    )
