"""Two-view relative geometry on calibrated rays.

Estimates the essential matrix from five-point minimal samples inside a
seeded RANSAC loop, scores matches by symmetric angular distance to the
epipolar plane, and decomposes the best model into a relative pose
^2T_1 = (R, unit t) using the cheirality vote of the inliers.

The final model is polished by Gauss-Newton on the inlier angular residuals
over (rotation, translation-direction).  A linear eight-point refit is
deliberately avoided: near-planar scenes (a seafloor at roughly constant
depth) make the linear system rank-deficient, while the five-point
parameterization stays well-posed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose, matrix_to_quat, quat_to_matrix, skew

__all__ = [
    "TwoViewGeometry",
    "decompose_essential",
    "epipolar_angular_residuals",
    "essential_five_point",
    "essential_from_pose",
    "ransac_essential",
]


# ---------------------------------------------------------------------------
# polynomial machinery for the five-point solver
#
# The essential matrix is written E = x E1 + y E2 + z E3 + E4 over the
# four-dimensional nullspace of the 5x9 epipolar system.  det(E) = 0 and
# 2 E E^T E - tr(E E^T) E = 0 give ten cubic equations in (x, y, z); Gauss
# elimination against the ten leading degree-3 monomials leaves a 10x10
# multiplication (action) matrix whose eigenvectors hold the solutions.

_MONOMIALS: list[tuple[int, int, int]] = [
    (3, 0, 0), (2, 1, 0), (2, 0, 1), (1, 2, 0), (1, 1, 1), (1, 0, 2),
    (0, 3, 0), (0, 2, 1), (0, 1, 2), (0, 0, 3),
    (2, 0, 0), (1, 1, 0), (1, 0, 1), (0, 2, 0), (0, 1, 1), (0, 0, 2),
    (1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0),
]
_MONO_INDEX = {m: i for i, m in enumerate(_MONOMIALS)}
_DEG1 = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)]  # coefficient order [x, y, z, 1]


def _build_tables() -> tuple[np.ndarray, np.ndarray]:
    t11 = np.zeros((4, 4), dtype=np.int64)
    for a, ea in enumerate(_DEG1):
        for b, eb in enumerate(_DEG1):
            t11[a, b] = _MONO_INDEX[tuple(np.add(ea, eb))]
    tf4 = np.zeros((20, 4), dtype=np.int64)
    for m, em in enumerate(_MONOMIALS):
        for a, ea in enumerate(_DEG1):
            key = tuple(np.add(em, ea))
            # degree-4 combinations can only multiply zero coefficients;
            # route them to slot 0 where they add exact zeros
            tf4[m, a] = _MONO_INDEX.get(key, 0)
    return t11, tf4


_T11, _TF4 = _build_tables()


def _pmul_11(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product of two degree-<=1 polynomials, stacked leading dims."""
    prod = a[..., :, None] * b[..., None, :]
    out = np.zeros(a.shape[:-1] + (20,))
    np.add.at(out.reshape(-1, 20), (slice(None), _T11.ravel()), prod.reshape(-1, 16))
    return out


def _pmul_f1(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product of a degree-<=2 polynomial (full 20-vector) with degree-<=1."""
    prod = a[..., :, None] * b[..., None, :]
    out = np.zeros(a.shape[:-1] + (20,))
    np.add.at(out.reshape(-1, 20), (slice(None), _TF4.ravel()), prod.reshape(-1, 80))
    return out


def essential_five_point(x1: np.ndarray, x2: np.ndarray) -> list[np.ndarray]:
    """All essential matrices consistent with five ray correspondences.

    x1, x2: (5, 3) ray coordinates in each camera frame satisfying
    x2^T E x1 = 0.  Returns up to ten real solutions, ||E|| = 1.
    """
    x1 = np.asarray(x1, dtype=float).reshape(5, 3)
    x2 = np.asarray(x2, dtype=float).reshape(5, 3)
    A = (x2[:, :, None] * x1[:, None, :]).reshape(5, 9)
    _, _, vt = np.linalg.svd(A)
    basis = vt[-4:][::-1]  # rows: E1, E2, E3, E4 as 9-vectors
    Es = basis.reshape(4, 3, 3)

    # entries of E as degree-1 polynomials, coefficient order [x, y, z, 1]
    ep = np.moveaxis(Es, 0, -1)  # (3, 3, 4)

    # G = 2 E E^T E - tr(E E^T) E  (nine degree-3 polynomials)
    eet = np.zeros((3, 3, 20))
    for i in range(3):
        for j in range(3):
            for k in range(3):
                eet[i, j] += _pmul_11(ep[i, k], ep[j, k])
    trace = eet[0, 0] + eet[1, 1] + eet[2, 2]
    rows = []
    for i in range(3):
        for j in range(3):
            acc = np.zeros(20)
            for k in range(3):
                lead = 2.0 * eet[i, k] - (trace if i == k else 0.0)
                acc += _pmul_f1(lead, ep[k, j])
            rows.append(acc)

    # det(E) = sum over first-row cofactor expansion
    det = np.zeros(20)
    for c, (c1, c2), sign in (
        (0, (1, 2), 1.0),
        (1, (0, 2), -1.0),
        (2, (0, 1), 1.0),
    ):
        minor = _pmul_11(ep[1, c1], ep[2, c2]) - _pmul_11(ep[1, c2], ep[2, c1])
        det += sign * _pmul_f1(minor, ep[0, c])
    system = np.vstack([det] + rows)  # (10, 20)

    lead = system[:, :10]
    rest = system[:, 10:]
    try:
        B = np.linalg.solve(lead, rest)
    except np.linalg.LinAlgError:
        return []

    # action of multiplication-by-x on the quotient basis
    # basis order: [x^2, xy, xz, y^2, yz, z^2, x, y, z, 1]
    T = np.zeros((10, 10))
    T[0:6] = -B[0:6]
    T[6, 0] = 1.0
    T[7, 1] = 1.0
    T[8, 2] = 1.0
    T[9, 6] = 1.0

    vals, vecs = np.linalg.eig(T)
    out = []
    for idx in range(10):
        if abs(vals[idx].imag) > 1e-6 * (1.0 + abs(vals[idx])):
            continue
        v = vecs[:, idx]
        v = np.real(v * np.exp(-1j * np.angle(v[9])))
        if abs(v[9]) < 1e-12:
            continue
        x, y, z = v[6] / v[9], v[7] / v[9], v[8] / v[9]
        E = x * Es[0] + y * Es[1] + z * Es[2] + Es[3]
        norm = np.linalg.norm(E)
        if norm < 1e-12 or not np.isfinite(E).all():
            continue
        out.append(E / norm)
    return out


def essential_from_pose(rel: Pose) -> np.ndarray:
    """E with x2^T E x1 = 0 for the relative pose ^2T_1, ||E|| = 1."""
    E = skew(rel.t) @ rel.rotation()
    return E / np.linalg.norm(E)


def epipolar_angular_residuals(E: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Symmetric angular distance (rad) of unit rays to the epipolar planes."""
    n2 = x1 @ E.T  # per-row E @ x1
    n1 = x2 @ E  # per-row E^T @ x2
    s2 = np.abs((x2 * n2).sum(axis=1)) / np.maximum(np.linalg.norm(n2, axis=1), 1e-15)
    s1 = np.abs((x1 * n1).sum(axis=1)) / np.maximum(np.linalg.norm(n1, axis=1), 1e-15)
    return np.arcsin(np.clip(np.maximum(s1, s2), 0.0, 1.0))


def _cheirality_depths(R: np.ndarray, t: np.ndarray, x1: np.ndarray, x2: np.ndarray):
    """Depth signs for rays under candidate ^2T_1 = (R, t)."""
    rx1 = x1 @ R.T
    cross = np.cross(x2, rx1)
    denom = (cross**2).sum(axis=1)
    d1 = -(cross * np.cross(x2, t[None, :])).sum(axis=1) / np.maximum(denom, 1e-18)
    p2 = d1[:, None] * rx1 + t[None, :]
    d2 = (p2 * x2).sum(axis=1)
    return d1, d2


def decompose_essential(
    E: np.ndarray, x1: np.ndarray, x2: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Relative rotation and unit translation (^2T_1) by cheirality vote."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    best = None
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for t in (U[:, 2], -U[:, 2]):
            d1, d2 = _cheirality_depths(R, t, x1, x2)
            votes = int(((d1 > 0) & (d2 > 0)).sum())
            if best is None or votes > best[0]:
                best = (votes, R, t)
    return best[1], best[2]


@dataclass
class TwoViewGeometry:
    """Verified relative geometry ^2T_1 with unit-norm translation."""

    rel_pose: Pose  # translation is a unit direction (scale-free)
    inlier_mask: np.ndarray
    n_inliers: int
    residual_rad: float  # mean inlier angular residual

    def essential(self) -> np.ndarray:
        return essential_from_pose(self.rel_pose)


def _unit_tangent_basis(t: np.ndarray) -> np.ndarray:
    a = np.array([1.0, 0.0, 0.0]) if abs(t[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    b1 = np.cross(t, a)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(t, b1)
    return np.stack([b1, b2], axis=1)


def _polish(R: np.ndarray, t: np.ndarray, x1: np.ndarray, x2: np.ndarray, iters: int = 8):
    """Gauss-Newton on angular residuals over (rotation, unit translation)."""

    def residuals(Rc, tc):
        return epipolar_angular_residuals(skew(tc) @ Rc, x1, x2)

    from .geometry import quat_from_rotvec, quat_multiply

    q = matrix_to_quat(R)
    cost = float((residuals(R, t) ** 2).sum())
    eps = 1e-7
    for _ in range(iters):
        Rc = quat_to_matrix(q)
        basis = _unit_tangent_basis(t)
        r0 = residuals(Rc, t)
        J = np.zeros((len(r0), 5))
        for a in range(3):
            dv = np.zeros(3)
            dv[a] = eps
            Rp = Rc @ quat_to_matrix(quat_from_rotvec(dv))
            J[:, a] = (residuals(Rp, t) - r0) / eps
        for a in range(2):
            tp = t + eps * basis[:, a]
            tp /= np.linalg.norm(tp)
            J[:, 3 + a] = (residuals(Rc, tp) - r0) / eps
        H = J.T @ J + 1e-12 * np.eye(5)
        try:
            step = np.linalg.solve(H, -J.T @ r0)
        except np.linalg.LinAlgError:
            break
        q_new = quat_multiply(q, quat_from_rotvec(step[:3]))
        t_new = t + basis @ step[3:]
        t_new /= np.linalg.norm(t_new)
        new_cost = float((residuals(quat_to_matrix(q_new), t_new) ** 2).sum())
        if new_cost >= cost:
            break
        q, t, cost = q_new, t_new, new_cost
        if np.linalg.norm(step) < 1e-14:
            break
    return quat_to_matrix(q), t


def ransac_essential(
    x1: np.ndarray,
    x2: np.ndarray,
    *,
    threshold_rad: float = 1e-3,
    confidence: float = 0.999,
    max_iterations: int = 500,
    min_inliers: int = 15,
    min_inlier_ratio: float = 0.25,
    seed: int = 0,
    refine: bool = True,
) -> TwoViewGeometry | None:
    """Seeded RANSAC essential-matrix fit on unit rays; None on rejection."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    n = len(x1)
    if n < 5:
        return None
    x1 = x1 / np.linalg.norm(x1, axis=1, keepdims=True)
    x2 = x2 / np.linalg.norm(x2, axis=1, keepdims=True)

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=int(seed))))
    best_mask = None
    best_count = 0
    best_E = None
    needed = max_iterations
    it = 0
    while it < min(needed, max_iterations):
        it += 1
        sample = rng.choice(n, size=5, replace=False)
        for E in essential_five_point(x1[sample], x2[sample]):
            res = epipolar_angular_residuals(E, x1, x2)
            mask = res < threshold_rad
            count = int(mask.sum())
            if count > best_count:
                best_count = count
                best_mask = mask
                best_E = E
                ratio = count / n
                if ratio >= 1.0:
                    needed = 0
                elif ratio > 0:
                    denom = np.log1p(-min(ratio**5, 1 - 1e-12))
                    needed = int(np.ceil(np.log(1.0 - confidence) / denom))

    if best_E is None or best_count < max(min_inliers, 5):
        return None
    if best_count / n < min_inlier_ratio:
        return None

    R, t = decompose_essential(best_E, x1[best_mask], x2[best_mask])
    if refine:
        R, t = _polish(R, t, x1[best_mask], x2[best_mask])
        res = epipolar_angular_residuals(skew(t) @ R, x1, x2)
        mask = res < threshold_rad
        # keep the polished model only if it explains at least as much
        if int(mask.sum()) >= best_count:
            best_mask = mask
            best_count = int(mask.sum())
    res = epipolar_angular_residuals(skew(t) @ R, x1, x2)
    rel = Pose(matrix_to_quat(R), t / np.linalg.norm(t))
    return TwoViewGeometry(
        rel_pose=rel,
        inlier_mask=best_mask,
        n_inliers=best_count,
        residual_rad=float(res[best_mask].mean()) if best_count else float("inf"),
    )
