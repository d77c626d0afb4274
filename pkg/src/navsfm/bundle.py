"""Joint refinement of poses, structure, intrinsics, and rig offset.

Levenberg-Marquardt on the survey cost: robustified reprojection residuals
for every observation plus a 6-dof penalty tying each camera to its
navigation prior.  Landmark blocks are eliminated with a Schur complement
so the linear solve only sees camera and shared-calibration parameters;
all per-observation work is vectorized.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .camera import (
    N_INTRINSIC_PARAMS,
    CameraIntrinsics,
    project_camera_frame,
    project_camera_frame_jacobians,
)
from .geometry import (
    Pose,
    ResidualWeights,
    RigExtrinsics,
    compose,
    compose_jacobians,
    inverse,
    inverse_jacobian,
    pose_residual_jacobians,
    retract,
)

__all__ = [
    "BundleObservations",
    "BundleOptions",
    "BundleResult",
    "bundle_adjust",
    "evaluate_cost_gradient",
]

# fixed charge for an observation whose point projects behind the camera;
# keeps steps that push geometry out of view from ever looking cheaper
_INVALID_COST = 1.0e8


@dataclass
class BundleObservations:
    """Flat observation table: observation k is camera ``cam_idx[k]``
    seeing landmark ``lm_idx[k]`` at ``pixels[k]``."""

    cam_idx: np.ndarray
    lm_idx: np.ndarray
    pixels: np.ndarray

    def __post_init__(self) -> None:
        self.cam_idx = np.asarray(self.cam_idx, dtype=np.int64).reshape(-1)
        self.lm_idx = np.asarray(self.lm_idx, dtype=np.int64).reshape(-1)
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        if not (len(self.cam_idx) == len(self.lm_idx) == len(self.pixels)):
            raise ValueError("observation arrays must have equal length")

    def __len__(self) -> int:
        return len(self.cam_idx)


@dataclass(frozen=True)
class BundleOptions:
    max_iterations: int = 50
    max_inner: int = 10
    robust_width_px: float = 2.0  # soft-L1 width; <= 0 disables robustification
    refine_intrinsics: bool = False
    refine_rig: bool = False
    lambda_init: float = 1e-4
    lambda_min: float = 1e-12
    lambda_max: float = 1e10
    gradient_tol: float = 1e-10
    step_tol: float = 1e-12
    cost_tol: float = 1e-12


@dataclass
class BundleResult:
    poses: list[Pose]
    landmarks: np.ndarray
    intrinsics: CameraIntrinsics
    rig: RigExtrinsics
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    message: str
    trace: list[float] = field(default_factory=list)


def _robust_scale_and_cost(sq_norms: np.ndarray, width: float) -> tuple[np.ndarray, float]:
    """IRLS residual scaling sqrt(rho'(s)) and total robust cost sum rho(s)
    for the soft-L1 loss rho(s) = 2 w^2 (sqrt(1 + s/w^2) - 1)."""
    if width <= 0:
        return np.ones_like(sq_norms), float(sq_norms.sum())
    w2 = width * width
    base = 1.0 + sq_norms / w2
    cost = float((2.0 * w2 * (np.sqrt(base) - 1.0)).sum())
    return base ** -0.25, cost


def _prior_terms(
    poses: list[Pose],
    priors: list[Pose | None],
    weights: ResidualWeights,
    rig: RigExtrinsics,
    refine_rig: bool,
) -> list[tuple[int, np.ndarray, np.ndarray, np.ndarray | None]]:
    """Per-prior (camera index, residual, J_camera, J_rig) with the prior
    target chained through the current rig offset."""
    inv_rig = inverse(rig.transform)
    J_invrig = inverse_jacobian(rig.transform) if refine_rig else None
    out = []
    for c, prior in enumerate(priors):
        if prior is None:
            continue
        target = compose(inv_rig, prior)
        r, J_cam, J_target = pose_residual_jacobians(poses[c], target, weights)
        J_rig = None
        if refine_rig:
            J_target_invrig, _ = compose_jacobians(inv_rig, prior)
            J_rig = J_target @ J_target_invrig @ J_invrig
        out.append((c, r, J_cam, J_rig))
    return out


def _evaluate_cost(
    poses: list[Pose],
    landmarks: np.ndarray,
    obs: BundleObservations,
    intrinsics: CameraIntrinsics,
    priors: list[Pose | None],
    weights: ResidualWeights,
    rig: RigExtrinsics,
    width: float,
) -> float:
    R_all = np.stack([p.rotation() for p in poses])
    t_all = np.stack([p.t for p in poses])
    x_cam = (
        np.einsum("kab,kb->ka", R_all[obs.cam_idx], landmarks[obs.lm_idx])
        + t_all[obs.cam_idx]
    )
    pix, valid = project_camera_frame(x_cam, intrinsics)
    res = np.where(valid[:, None], pix - obs.pixels, 0.0)
    _, cost = _robust_scale_and_cost(np.einsum("ki,ki->k", res, res)[valid], width)
    cost += _INVALID_COST * float((~valid).sum())
    inv_rig = inverse(rig.transform)
    for c, prior in enumerate(priors):
        if prior is None:
            continue
        r, _, _ = pose_residual_jacobians(poses[c], compose(inv_rig, prior), weights)
        cost += float(r @ r)
    return cost


def _linearize(
    poses: list[Pose],
    landmarks: np.ndarray,
    obs: BundleObservations,
    intrinsics: CameraIntrinsics,
    priors: list[Pose | None],
    weights: ResidualWeights,
    rig: RigExtrinsics,
    options: BundleOptions,
):
    """Weighted residuals and Jacobian blocks at the current state."""
    n_glob = (N_INTRINSIC_PARAMS if options.refine_intrinsics else 0) + (
        6 if options.refine_rig else 0
    )
    R_all = np.stack([p.rotation() for p in poses])
    t_all = np.stack([p.t for p in poses])
    ci, li = obs.cam_idx, obs.lm_idx
    X = landmarks[li]
    x_cam = np.einsum("kab,kb->ka", R_all[ci], X) + t_all[ci]
    pix, valid, J_xc, J_intr = project_camera_frame_jacobians(x_cam, intrinsics)

    res = np.where(valid[:, None], pix - obs.pixels, 0.0)
    sq = np.einsum("ki,ki->k", res, res)
    scale, robust_cost = _robust_scale_and_cost(sq[valid], options.robust_width_px)
    full_scale = np.zeros(len(obs))
    full_scale[valid] = scale
    cost = robust_cost + _INVALID_COST * float((~valid).sum())

    JR = np.einsum("kia,kab->kib", J_xc, R_all[ci])  # d pix / d world point
    Sx = np.zeros((len(obs), 3, 3))
    Sx[:, 0, 1], Sx[:, 0, 2] = -X[:, 2], X[:, 1]
    Sx[:, 1, 0], Sx[:, 1, 2] = X[:, 2], -X[:, 0]
    Sx[:, 2, 0], Sx[:, 2, 1] = -X[:, 1], X[:, 0]
    J_pose = np.concatenate([-np.einsum("kib,kbc->kic", JR, Sx), J_xc], axis=2)

    J_glob = np.zeros((len(obs), 2, n_glob))
    if options.refine_intrinsics:
        J_glob[:, :, :N_INTRINSIC_PARAMS] = J_intr

    s = full_scale[:, None]
    res_w = s * res
    J_pose_w = s[..., None] * J_pose
    J_pt_w = s[..., None] * JR
    J_glob_w = s[..., None] * J_glob

    prior_blocks = _prior_terms(poses, priors, weights, rig, options.refine_rig)
    cost += sum(float(r @ r) for _, r, _, _ in prior_blocks)
    return res_w, J_pose_w, J_pt_w, J_glob_w, prior_blocks, cost, n_glob


def _landmark_pairs(lm_sorted_counts: np.ndarray, starts: np.ndarray):
    """All ordered index pairs within each equal-landmark group, vectorized
    per distinct group size."""
    ai_parts, bi_parts = [], []
    for d in np.unique(lm_sorted_counts):
        group_starts = starts[lm_sorted_counts == d]
        members = group_starts[:, None] + np.arange(d)[None, :]
        ai_parts.append(np.repeat(members, d, axis=1).ravel())
        bi_parts.append(np.tile(members, (1, d)).ravel())
    return np.concatenate(ai_parts), np.concatenate(bi_parts)


def _solve_step(lin, obs, n_cams, n_lms, lam):
    """One damped normal-equation solve with the landmark blocks eliminated.
    Returns (delta_cams (C,6), delta_glob (g,), delta_lms (M,3)) or None."""
    res_w, J_pose_w, J_pt_w, J_glob_w, prior_blocks, _, n_glob = lin
    ci, li = obs.cam_idx, obs.lm_idx
    n_p = 6 * n_cams + n_glob

    U = np.zeros((n_cams, 6, 6))
    np.add.at(U, ci, np.einsum("kia,kib->kab", J_pose_w, J_pose_w))
    g_cam = np.zeros((n_cams, 6))
    np.add.at(g_cam, ci, np.einsum("kia,ki->ka", J_pose_w, res_w))

    V = np.zeros((n_lms, 3, 3))
    np.add.at(V, li, np.einsum("kia,kib->kab", J_pt_w, J_pt_w))
    g_lm = np.zeros((n_lms, 3))
    np.add.at(g_lm, li, np.einsum("kia,ki->ka", J_pt_w, res_w))

    W = np.einsum("kia,kib->kab", J_pose_w, J_pt_w)  # (K, 6, 3)

    U_cg = np.zeros((n_cams, 6, n_glob))
    U_gg = np.zeros((n_glob, n_glob))
    g_glob = np.zeros(n_glob)
    Wg = np.zeros((n_lms, n_glob, 3))
    if n_glob:
        np.add.at(U_cg, ci, np.einsum("kia,kib->kab", J_pose_w, J_glob_w))
        U_gg += np.einsum("kia,kib->ab", J_glob_w, J_glob_w)
        g_glob += np.einsum("kia,ki->a", J_glob_w, res_w)
        np.add.at(Wg, li, np.einsum("kia,kib->kab", J_glob_w, J_pt_w))

    for c, r, J_cam, J_rig in prior_blocks:
        U[c] += J_cam.T @ J_cam
        g_cam[c] += J_cam.T @ r
        if J_rig is not None:
            U_cg[c, :, n_glob - 6 :] += J_cam.T @ J_rig
            U_gg[n_glob - 6 :, n_glob - 6 :] += J_rig.T @ J_rig
            g_glob[n_glob - 6 :] += J_rig.T @ r

    diag = np.arange(6)
    U[:, diag, diag] *= 1.0 + lam
    U[:, diag, diag] += 1e-12
    d3 = np.arange(3)
    V[:, d3, d3] *= 1.0 + lam
    V[:, d3, d3] += 1e-12
    if n_glob:
        dg = np.arange(n_glob)
        U_gg[dg, dg] *= 1.0 + lam
        U_gg[dg, dg] += 1e-12

    try:
        V_inv = np.linalg.inv(V)
    except np.linalg.LinAlgError:
        return None
    Y = np.einsum("kab,kbc->kac", W, V_inv[li])  # (K, 6, 3)

    rhs_cam = -g_cam
    np.add.at(rhs_cam, ci, np.einsum("kab,kb->ka", Y, g_lm[li]))
    rows, cols, vals = [], [], []

    def add_blocks(block_rows, block_cols, blocks):
        br, bc = blocks.shape[-2:]
        r_idx = block_rows[:, None, None] + np.arange(br, dtype=np.int64)[None, :, None]
        c_idx = block_cols[:, None, None] + np.arange(bc, dtype=np.int64)[None, None, :]
        rows.append(np.broadcast_to(r_idx, blocks.shape).ravel())
        cols.append(np.broadcast_to(c_idx, blocks.shape).ravel())
        vals.append(blocks.reshape(-1))

    cam_offsets = 6 * np.arange(n_cams, dtype=np.int64)
    add_blocks(cam_offsets, cam_offsets, U)

    order = np.argsort(li, kind="stable")
    li_sorted = li[order]
    uniq, starts, counts = np.unique(li_sorted, return_index=True, return_counts=True)
    ai, bi = _landmark_pairs(counts, starts)
    oa, ob = order[ai], order[bi]
    pair_blocks = -np.einsum("pac,pbc->pab", Y[oa], W[ob])
    add_blocks(6 * ci[oa], 6 * ci[ob], pair_blocks)

    if n_glob:
        Yg = np.einsum("mab,mbc->mac", Wg, V_inv)  # (M, g, 3)
        rhs_glob = -g_glob + np.einsum("mab,mb->a", Yg, g_lm)
        corr = np.zeros_like(U_cg)
        np.add.at(corr, ci, -np.einsum("kac,kgc->kag", Y, Wg[li]))
        cg_total = U_cg + corr
        glob_offset = np.full(n_cams, 6 * n_cams, dtype=np.int64)
        add_blocks(cam_offsets, glob_offset, cg_total)
        add_blocks(glob_offset, cam_offsets, np.swapaxes(cg_total, 1, 2))
        gg_total = U_gg - np.einsum("mac,mbc->ab", Yg, Wg)
        add_blocks(
            np.array([6 * n_cams], dtype=np.int64),
            np.array([6 * n_cams], dtype=np.int64),
            gg_total[None],
        )
        rhs = np.concatenate([rhs_cam.ravel(), rhs_glob])
    else:
        rhs = rhs_cam.ravel()

    S = scipy.sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_p, n_p),
    ).tocsc()
    try:
        delta = scipy.sparse.linalg.splu(S).solve(rhs)
    except RuntimeError:
        return None
    if not np.all(np.isfinite(delta)):
        return None

    d_cam = delta[: 6 * n_cams].reshape(n_cams, 6)
    d_glob = delta[6 * n_cams :]
    acc = g_lm.copy()
    np.add.at(acc, li, np.einsum("kab,ka->kb", W, d_cam[ci]))
    if n_glob:
        acc += np.einsum("mab,a->mb", Wg, d_glob)
    d_lm = -np.einsum("mab,mb->ma", V_inv, acc)
    return d_cam, d_glob, d_lm


def _apply_step(poses, landmarks, intrinsics, rig, step, options):
    d_cam, d_glob, d_lm = step
    new_poses = [retract(p, d) for p, d in zip(poses, d_cam)]
    new_lms = landmarks + d_lm
    new_K = intrinsics
    new_rig = rig
    used = 0
    if options.refine_intrinsics:
        new_K = intrinsics.with_params(intrinsics.param_vector() + d_glob[:N_INTRINSIC_PARAMS])
        used = N_INTRINSIC_PARAMS
    if options.refine_rig:
        new_rig = RigExtrinsics(retract(rig.transform, d_glob[used : used + 6]))
    return new_poses, new_lms, new_K, new_rig


def bundle_adjust(
    poses: list[Pose],
    landmarks: np.ndarray,
    observations: BundleObservations,
    intrinsics: CameraIntrinsics,
    *,
    priors: list[Pose | None] | None = None,
    prior_weights: ResidualWeights | None = None,
    rig: RigExtrinsics | None = None,
    options: BundleOptions | None = None,
) -> BundleResult:
    """Minimize the reprojection + prior-penalty cost.

    ``priors`` holds one platform pose per camera (None disables the term
    for that camera); each is chained through the rig offset to become the
    camera-frame target.  Accepted steps never increase the cost; if no
    decreasing step exists, the best state found is returned with
    ``converged=False`` and the cost trace for diagnosis.
    """
    options = options or BundleOptions()
    if rig is None:
        rig = RigExtrinsics.identity()
    if priors is None:
        priors = [None] * len(poses)
    if len(priors) != len(poses):
        raise ValueError("need exactly one prior entry (or None) per camera")
    if prior_weights is None:
        prior_weights = ResidualWeights.identity()
    if len(observations) and (
        observations.cam_idx.max() >= len(poses)
        or observations.lm_idx.max() >= len(landmarks)
    ):
        raise ValueError("observation indices out of range")

    poses = [p.copy() for p in poses]
    landmarks = np.array(landmarks, dtype=np.float64)
    intrinsics = intrinsics.copy()
    rig = RigExtrinsics(rig.transform.copy())

    cost = _evaluate_cost(
        poses, landmarks, observations, intrinsics, priors, prior_weights, rig,
        options.robust_width_px,
    )
    initial_cost = cost
    trace = [cost]
    lam = options.lambda_init
    converged = False
    message = "iteration limit reached"
    iterations = 0

    for iterations in range(1, options.max_iterations + 1):
        if cost <= options.cost_tol:
            converged = True
            message = "cost at tolerance floor"
            break
        lin = _linearize(
            poses, landmarks, observations, intrinsics, priors, prior_weights, rig, options
        )
        step = None
        accepted = False
        closest = np.inf
        for _ in range(options.max_inner):
            step = _solve_step(lin, observations, len(poses), len(landmarks), lam)
            if step is None:
                lam = min(lam * 10.0, options.lambda_max)
                continue
            cand = _apply_step(poses, landmarks, intrinsics, rig, step, options)
            cand_cost = _evaluate_cost(
                cand[0], cand[1], observations, cand[2], priors, prior_weights, cand[3],
                options.robust_width_px,
            )
            if np.isfinite(cand_cost):
                closest = min(closest, cand_cost)
            if np.isfinite(cand_cost) and cand_cost <= cost:
                step_norm = float(
                    np.sqrt(sum(np.sum(np.square(s)) for s in step))
                )
                rel_drop = (cost - cand_cost) / max(cost, 1e-300)
                poses, landmarks, intrinsics, rig = cand
                cost = cand_cost
                trace.append(cost)
                lam = max(lam / 3.0, options.lambda_min)
                accepted = True
                if rel_drop < options.cost_tol:
                    converged = True
                    message = "cost decrease below tolerance"
                elif step_norm < options.step_tol:
                    converged = True
                    message = "step size below tolerance"
                break
            lam = min(lam * 4.0, options.lambda_max)
        if not accepted:
            if closest <= cost * (1.0 + 1e-12):
                converged = True
                message = "converged: cost plateau"
            else:
                message = "stalled: no cost-decreasing step found"
            break
        if converged:
            break

    return BundleResult(
        poses=poses,
        landmarks=landmarks,
        intrinsics=intrinsics,
        rig=rig,
        initial_cost=initial_cost,
        final_cost=cost,
        iterations=iterations,
        converged=converged,
        message=message,
        trace=trace,
    )


def evaluate_cost_gradient(
    poses: list[Pose],
    landmarks: np.ndarray,
    observations: BundleObservations,
    intrinsics: CameraIntrinsics,
    *,
    priors: list[Pose | None] | None = None,
    prior_weights: ResidualWeights | None = None,
    rig: RigExtrinsics | None = None,
    robust_width_px: float = 2.0,
    refine_intrinsics: bool = True,
    refine_rig: bool = True,
) -> tuple[float, dict[str, np.ndarray]]:
    """Total cost and its exact analytic gradient.

    Gradient entries follow the same local parameterizations the optimizer
    steps in: right pose increments for cameras and rig, plain coordinates
    for landmarks and intrinsics.
    """
    if priors is None:
        priors = [None] * len(poses)
    if prior_weights is None:
        prior_weights = ResidualWeights.identity()
    if rig is None:
        rig = RigExtrinsics.identity()
    options = BundleOptions(
        robust_width_px=robust_width_px,
        refine_intrinsics=refine_intrinsics,
        refine_rig=refine_rig,
    )
    landmarks = np.asarray(landmarks, dtype=np.float64)
    res_w, J_pose_w, J_pt_w, J_glob_w, prior_blocks, cost, n_glob = _linearize(
        poses, landmarks, observations, intrinsics, priors, prior_weights, rig, options
    )
    ci, li = observations.cam_idx, observations.lm_idx
    g_cam = np.zeros((len(poses), 6))
    np.add.at(g_cam, ci, 2.0 * np.einsum("kia,ki->ka", J_pose_w, res_w))
    g_lm = np.zeros((len(landmarks), 3))
    np.add.at(g_lm, li, 2.0 * np.einsum("kia,ki->ka", J_pt_w, res_w))
    g_glob = 2.0 * np.einsum("kia,ki->a", J_glob_w, res_w) if n_glob else np.zeros(0)
    for c, r, J_cam, J_rig in prior_blocks:
        g_cam[c] += 2.0 * J_cam.T @ r
        if J_rig is not None:
            g_glob[n_glob - 6 :] += 2.0 * J_rig.T @ r
    grads = {"cameras": g_cam, "landmarks": g_lm}
    used = 0
    if refine_intrinsics:
        grads["intrinsics"] = g_glob[:N_INTRINSIC_PARAMS]
        used = N_INTRINSIC_PARAMS
    if refine_rig:
        grads["rig"] = g_glob[used : used + 6]
    return cost, grads
