"""Synthetic seafloor survey generator.

Produces ground-truth lawnmower surveys (nadir fisheye camera over a smooth
bumpy heightfield), corrupts navigation with white + random-walk noise, and
renders pairwise feature correspondences with pixel noise, dropout, planted
outliers, and degraded "weak" strips.

The world frame is a local metric East-North-Up frame centered at the mean
vehicle position, so that navigation records written around a fixed anchor
parse back to exactly the same frame.  All randomness is drawn from
counter-based streams keyed by (seed, concern, image id), so toggling one
noise concern never reshuffles another and determinism is independent of
any parallel evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .camera import CameraIntrinsics, project_camera_frame, undistort_angles
from .geometry import (
    Pose,
    RigExtrinsics,
    compose,
    nav_to_camera_prior,
    quat_from_rotvec,
    quat_multiply,
    quat_to_matrix,
)
from .io_formats import (
    MatchSet,
    NavigationRecord,
    PairMatches,
    attitude_matrix,
    records_from_vehicle_poses,
)

__all__ = [
    "DEFAULT_ANCHOR",
    "NoiseModel",
    "RenderedObservations",
    "SurveyConfig",
    "SurveyConfigError",
    "SurveyTruth",
    "Terrain",
    "WeakStrip",
    "corrupt_navigation",
    "covisible_landmarks",
    "default_intrinsics",
    "default_rig",
    "generate_survey",
    "render_observations",
    "strip_image_mask",
    "usable_half_fov",
]

# Anchor for written navigation records (lat deg, lon deg, depth m).
DEFAULT_ANCHOR = (34.45, 132.31, 60.0)

# RNG stream ids, one per concern.
_S_TERRAIN = 0
_S_LANDMARK = 1
_S_NAV_WHITE = 2
_S_NAV_DRIFT = 3
_S_PIXEL = 4
_S_DROPOUT = 5
_S_OUTLIER = 6


def _rng(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=600.0,
        fy=600.0,
        cx=511.5,
        cy=511.5,
        k=(-0.012, 0.003, -0.0008, 0.0002),
        width=1024,
        height=1024,
    )


def default_rig() -> RigExtrinsics:
    """Nadir camera: optical axis along body -z (down), 90 deg twist about z."""
    rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    return RigExtrinsics(transform=Pose.from_rt(rz @ rx, np.array([0.0, 0.0, -0.25])))


class SurveyConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SurveyConfig:
    track_count: int = 4
    track_length: float = 48.0
    track_spacing: float = 5.0
    altitude: float = 8.0
    image_interval: float = 2.0
    cross_track: bool = True
    terrain_amplitude: float = 0.8
    terrain_roughness: float = 1.0
    landmark_density: float = 0.5
    fov_margin: float = 0.85
    seed: int = 0

    def __post_init__(self) -> None:
        positive = {
            "track_length": self.track_length,
            "track_spacing": self.track_spacing,
            "altitude": self.altitude,
            "image_interval": self.image_interval,
            "terrain_roughness": self.terrain_roughness,
            "landmark_density": self.landmark_density,
        }
        for name, value in positive.items():
            if not value > 0:
                raise SurveyConfigError(f"{name} must be > 0, got {value}")
        if self.track_count < 1:
            raise SurveyConfigError("track_count must be >= 1")
        if self.image_interval > self.track_length:
            raise SurveyConfigError("image_interval larger than track_length")
        if not 0 < self.fov_margin <= 1:
            raise SurveyConfigError("fov_margin must be in (0, 1]")
        if self.terrain_amplitude < 0 or self.terrain_amplitude >= self.altitude / 2:
            raise SurveyConfigError(
                "terrain_amplitude must be in [0, altitude/2) to keep the "
                "seafloor well below the vehicle"
            )
        if self.seed < 0:
            raise SurveyConfigError("seed must be non-negative")


def usable_half_fov(intrinsics: CameraIntrinsics, margin: float) -> float:
    """Half-angle (rad) of the usable view cone: margin times the lens edge."""
    r_edge = min(
        intrinsics.cx,
        intrinsics.cy,
        intrinsics.width - 1 - intrinsics.cx,
        intrinsics.height - 1 - intrinsics.cy,
    )
    theta_edge = undistort_angles(
        np.array([r_edge / min(intrinsics.fx, intrinsics.fy)]), intrinsics.k
    )[0]
    return float(margin * theta_edge)


@dataclass(frozen=True)
class WeakStrip:
    """Axis-aligned region of degraded imaging, keyed on camera position.

    Observations of images whose true camera center lies inside the region
    survive with probability multiplied by (1 - multiplier).  A None range
    leaves that axis unbounded.
    """

    x_range: Optional[tuple[float, float]] = None
    y_range: Optional[tuple[float, float]] = None
    multiplier: float = 0.9

    def __post_init__(self) -> None:
        if not 0.0 <= self.multiplier <= 1.0:
            raise ValueError("multiplier must be in [0, 1]")
        for rng_ in (self.x_range, self.y_range):
            if rng_ is not None and not rng_[0] <= rng_[1]:
                raise ValueError(f"empty range {rng_}")

    def contains(self, x: float, y: float) -> bool:
        if self.x_range is not None and not self.x_range[0] <= x <= self.x_range[1]:
            return False
        if self.y_range is not None and not self.y_range[0] <= y <= self.y_range[1]:
            return False
        return True


@dataclass(frozen=True)
class NoiseModel:
    nav_pos_sigma_m: float = 0.0
    nav_rot_sigma_deg: float = 0.0
    nav_drift_rate_m: float = 0.0  # per sqrt(second)
    nav_rot_drift_rate_deg: float = 0.0  # per sqrt(second)
    pixel_sigma_px: float = 0.0
    outlier_fraction: float = 0.0
    dropout_fraction: float = 0.0
    weak_strips: tuple[WeakStrip, ...] = ()

    def __post_init__(self) -> None:
        for name in (
            "nav_pos_sigma_m",
            "nav_rot_sigma_deg",
            "nav_drift_rate_m",
            "nav_rot_drift_rate_deg",
            "pixel_sigma_px",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("outlier_fraction", "dropout_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")


@dataclass
class Terrain:
    """Heightfield as a sum of smooth Gaussian bumps."""

    centers: np.ndarray  # (k, 2)
    amplitudes: np.ndarray  # (k,)
    sigmas: np.ndarray  # (k,)

    def height(self, xy: np.ndarray) -> np.ndarray:
        xy = np.atleast_2d(xy)
        d2 = ((xy[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        return (self.amplitudes[None, :] * np.exp(-d2 / (2.0 * self.sigmas[None, :] ** 2))).sum(
            axis=1
        )


@dataclass
class SurveyTruth:
    config: SurveyConfig
    camera_poses: list[Pose]  # ^cT_w per image, capture order
    timestamps: np.ndarray  # (n,) seconds
    landmarks: np.ndarray  # (L, 3)
    observations: list[tuple[np.ndarray, np.ndarray]]  # per image: (sorted landmark ids, pixels)
    intrinsics: CameraIntrinsics
    rig: RigExtrinsics
    terrain: Terrain

    @property
    def image_count(self) -> int:
        return len(self.camera_poses)

    def vehicle_poses(self) -> list[Pose]:
        return [compose(self.rig.transform, cam) for cam in self.camera_poses]


def _lawnmower_path(cfg: SurveyConfig) -> tuple[np.ndarray, np.ndarray]:
    """Vehicle centers (n, 3) and headings as (dx, dy) unit rows."""
    n_cols = int(np.floor(cfg.track_length / cfg.image_interval + 1e-9)) + 1
    centers = []
    headings = []
    for track in range(cfg.track_count):
        y = track * cfg.track_spacing
        xs = np.arange(n_cols) * cfg.image_interval
        direction = 1.0
        if track % 2 == 1:
            xs = xs[::-1]
            direction = -1.0
        for x in xs:
            centers.append((x, y, cfg.altitude))
            headings.append((direction, 0.0))
    if cfg.cross_track:
        x = cfg.track_length / 2.0
        y0 = -0.6 * cfg.track_spacing
        y1 = (cfg.track_count - 1 + 0.6) * cfg.track_spacing
        for y in np.arange(y0, y1 + 1e-9, cfg.image_interval):
            centers.append((x, float(y), cfg.altitude))
            headings.append((0.0, 1.0))
    return np.asarray(centers, dtype=float), np.asarray(headings, dtype=float)


def _yaw_deg(heading: np.ndarray) -> float:
    # Yaw rotates the body about the down axis; zero yaw points the body
    # x-axis east, so travelling along +x needs yaw 0 and +y needs -90.
    return float(-np.degrees(np.arctan2(heading[1], heading[0])))


def _build_terrain(cfg: SurveyConfig, bounds: np.ndarray) -> Terrain:
    rng = _rng(cfg.seed, _S_TERRAIN)
    area = (bounds[1, 0] - bounds[0, 0]) * (bounds[1, 1] - bounds[0, 1])
    count = max(3, int(round(cfg.terrain_roughness * area / 50.0)))
    centers = rng.uniform(bounds[0], bounds[1], size=(count, 2))
    # scale so the summed field stays within +-terrain_amplitude with slack
    amplitudes = rng.uniform(-cfg.terrain_amplitude, cfg.terrain_amplitude, size=count) * 0.5
    sigmas = rng.uniform(3.0, 9.0, size=count)
    return Terrain(centers=centers, amplitudes=amplitudes, sigmas=sigmas)


def generate_survey(
    cfg: SurveyConfig,
    intrinsics: CameraIntrinsics | None = None,
    rig: RigExtrinsics | None = None,
) -> SurveyTruth:
    """Build the ground-truth survey for a config; deterministic in cfg.seed."""
    intrinsics = intrinsics if intrinsics is not None else default_intrinsics()
    rig = rig if rig is not None else default_rig()

    theta_max = usable_half_fov(intrinsics, cfg.fov_margin)
    swath = 2.0 * cfg.altitude * np.tan(theta_max)
    if cfg.track_count > 1 and cfg.track_spacing >= swath:
        raise SurveyConfigError(
            f"track_spacing {cfg.track_spacing} m >= swath width {swath:.2f} m "
            f"(altitude {cfg.altitude} m, usable half-FOV "
            f"{np.degrees(theta_max):.1f} deg): adjacent tracks cannot overlap"
        )

    centers, headings = _lawnmower_path(cfg)
    centers = centers - centers.mean(axis=0, keepdims=True)

    steps = np.linalg.norm(np.diff(centers, axis=0), axis=1)
    timestamps = np.concatenate([[0.0], np.cumsum(steps)])  # speed 1 m/s

    vehicle_poses = []
    camera_poses = []
    for c, h in zip(centers, headings):
        R_wb = attitude_matrix(_yaw_deg(h), 0.0, 0.0)
        veh = Pose.from_rt(R_wb.T, -R_wb.T @ c)
        vehicle_poses.append(veh)
        camera_poses.append(nav_to_camera_prior(veh, rig))

    margin = (cfg.altitude + cfg.terrain_amplitude) * np.tan(theta_max) + 2.0
    lo = centers[:, :2].min(axis=0) - margin
    hi = centers[:, :2].max(axis=0) + margin
    bounds = np.stack([lo, hi])
    terrain = _build_terrain(cfg, bounds)

    rng = _rng(cfg.seed, _S_LANDMARK)
    area = float(np.prod(hi - lo))
    count = max(10, int(round(cfg.landmark_density * area)))
    xy = rng.uniform(lo, hi, size=(count, 2))
    z = terrain.height(xy) - cfg.altitude  # seafloor sits ~altitude below the vehicle
    landmarks = np.column_stack([xy, z])

    observations = []
    w, h = intrinsics.width, intrinsics.height
    for pose in camera_poses:
        pts_cam = pose.transform(landmarks)
        in_front = pts_cam[:, 2] > 1e-9
        rho = np.hypot(pts_cam[:, 0], pts_cam[:, 1])
        theta = np.arctan2(rho, np.where(in_front, pts_cam[:, 2], 1.0))
        cone = in_front & (theta <= theta_max)
        pixels, valid = project_camera_frame(pts_cam[cone], intrinsics)
        in_bounds = (
            valid
            & (pixels[:, 0] >= 0.0)
            & (pixels[:, 0] <= w - 1.0)
            & (pixels[:, 1] >= 0.0)
            & (pixels[:, 1] <= h - 1.0)
        )
        ids = np.flatnonzero(cone)[in_bounds]
        observations.append((ids.astype(np.int64), pixels[in_bounds].astype(float)))

    return SurveyTruth(
        config=cfg,
        camera_poses=camera_poses,
        timestamps=timestamps,
        landmarks=landmarks,
        observations=observations,
        intrinsics=intrinsics,
        rig=rig,
        terrain=terrain,
    )


def covisible_landmarks(truth: SurveyTruth, i: int, j: int) -> np.ndarray:
    """Landmark ids observed (noise-free) by both images."""
    return np.intersect1d(truth.observations[i][0], truth.observations[j][0], assume_unique=True)


def strip_image_mask(truth: SurveyTruth, strips: tuple[WeakStrip, ...]) -> np.ndarray:
    """Boolean mask over images whose true camera center lies in any strip."""
    mask = np.zeros(truth.image_count, dtype=bool)
    for idx, pose in enumerate(truth.camera_poses):
        x, y, _ = pose.center()
        mask[idx] = any(s.contains(x, y) for s in strips)
    return mask


def corrupt_navigation(truth: SurveyTruth, noise: NoiseModel, seed: int) -> list[Pose]:
    """Vehicle-frame prior poses ^pT_w: truth mapped through the rig, perturbed.

    White noise is drawn per image; the random walk accumulates independent
    Gaussian steps with std rate*sqrt(dt) along capture order.
    """
    vehicle_poses = truth.vehicle_poses()
    pure = (
        noise.nav_pos_sigma_m == 0.0
        and noise.nav_rot_sigma_deg == 0.0
        and noise.nav_drift_rate_m == 0.0
        and noise.nav_rot_drift_rate_deg == 0.0
    )
    if pure:
        return [p.copy() for p in vehicle_poses]

    n = truth.image_count
    dts = np.diff(truth.timestamps, prepend=truth.timestamps[0])
    walk_rng = _rng(seed, _S_NAV_DRIFT)
    pos_steps = walk_rng.normal(size=(n, 3)) * (noise.nav_drift_rate_m * np.sqrt(dts))[:, None]
    rot_steps = (
        walk_rng.normal(size=(n, 3))
        * (np.radians(noise.nav_rot_drift_rate_deg) * np.sqrt(dts))[:, None]
    )
    pos_walk = np.cumsum(pos_steps, axis=0)
    rot_walk = np.cumsum(rot_steps, axis=0)

    priors = []
    for i, veh in enumerate(vehicle_poses):
        white = _rng(seed, _S_NAV_WHITE, i)
        dpos = white.normal(size=3) * noise.nav_pos_sigma_m + pos_walk[i]
        drot = white.normal(size=3) * np.radians(noise.nav_rot_sigma_deg) + rot_walk[i]
        q = quat_multiply(veh.q, quat_from_rotvec(drot))
        center = veh.center() + dpos
        R = quat_to_matrix(q)
        priors.append(Pose(q, -R @ center))
    return priors


@dataclass
class RenderedObservations:
    """Match set plus simulator-side ground-truth bookkeeping.

    The bookkeeping (labels, feature-to-landmark maps) never reaches
    pipeline input files; it exists for oracle-based tests and evaluation.
    """

    matches: MatchSet
    inlier_labels: dict[tuple[int, int], np.ndarray]  # True where the match is genuine
    feature_landmarks: dict[int, np.ndarray]  # per image: feature idx -> landmark id (-1 outlier)


def _strip_multiplier(center: np.ndarray, strips: tuple[WeakStrip, ...]) -> float:
    survive = 1.0
    for s in strips:
        if s.contains(center[0], center[1]):
            survive *= 1.0 - s.multiplier
    return 1.0 - survive


def render_observations(truth: SurveyTruth, noise: NoiseModel, seed: int) -> RenderedObservations:
    n = truth.image_count
    intr = truth.intrinsics

    surv_ids: list[np.ndarray] = []
    surv_pix: list[np.ndarray] = []
    for i in range(n):
        ids, pix = truth.observations[i]
        m = len(ids)
        drop_rng = _rng(seed, _S_DROPOUT, i)
        u_base = drop_rng.uniform(size=m)
        u_strip = drop_rng.uniform(size=m)
        strip_mult = _strip_multiplier(truth.camera_poses[i].center(), noise.weak_strips)
        keep = u_base >= noise.dropout_fraction
        if strip_mult > 0.0:
            keep &= u_strip >= strip_mult
        pix_rng = _rng(seed, _S_PIXEL, i)
        noisy = pix + pix_rng.normal(size=pix.shape) * noise.pixel_sigma_px
        surv_ids.append(ids[keep])
        surv_pix.append(noisy[keep])

    # candidate pairs: centers close enough for any shared landmark
    centers = np.array([p.center() for p in truth.camera_poses])
    theta_max = usable_half_fov(intr, truth.config.fov_margin)
    height_above = centers[:, 2].max() - truth.landmarks[:, 2].min()
    reach = 2.0 * height_above * np.tan(theta_max) + 1.0
    d2 = ((centers[:, None, :2] - centers[None, :, :2]) ** 2).sum(axis=2)
    cand_i, cand_j = np.nonzero(np.triu(d2 <= reach * reach, k=1))

    next_feat = [len(s) for s in surv_ids]
    extra_lm: list[list[int]] = [[] for _ in range(n)]
    pairs: dict[tuple[int, int], PairMatches] = {}
    labels: dict[tuple[int, int], np.ndarray] = {}
    bounds = np.array([intr.width - 1.0, intr.height - 1.0])

    for i, j in zip(cand_i.tolist(), cand_j.tolist()):
        shared, ia, ja = np.intersect1d(
            surv_ids[i], surv_ids[j], assume_unique=True, return_indices=True
        )
        if len(shared) == 0:
            continue
        fi = ia.astype(np.int64)
        fj = ja.astype(np.int64)
        pi = surv_pix[i][ia].copy()
        pj = surv_pix[j][ja].copy()
        genuine = np.ones(len(shared), dtype=bool)
        if noise.outlier_fraction > 0.0:
            out_rng = _rng(seed, _S_OUTLIER, i, j)
            bad = out_rng.uniform(size=len(shared)) < noise.outlier_fraction
            k = int(bad.sum())
            if k:
                rand_px = out_rng.uniform(size=(k, 4))
                pi[bad] = rand_px[:, 0:2] * bounds
                pj[bad] = rand_px[:, 2:4] * bounds
                fi[bad] = next_feat[i] + np.arange(k)
                fj[bad] = next_feat[j] + np.arange(k)
                next_feat[i] += k
                next_feat[j] += k
                extra_lm[i].extend([-1] * k)
                extra_lm[j].extend([-1] * k)
                genuine[bad] = False
        pairs[(i, j)] = PairMatches(feat_i=fi, feat_j=fj, pix_i=pi, pix_j=pj)
        labels[(i, j)] = genuine

    feature_landmarks = {
        i: np.concatenate([surv_ids[i], np.asarray(extra_lm[i], dtype=np.int64)])
        for i in range(n)
    }
    return RenderedObservations(
        matches=MatchSet(image_count=n, pairs=pairs),
        inlier_labels=labels,
        feature_landmarks=feature_landmarks,
    )


def navigation_records(
    truth: SurveyTruth, priors: list[Pose], anchor: tuple[float, float, float] = DEFAULT_ANCHOR
) -> list[NavigationRecord]:
    """Navigation CSV records for (possibly corrupted) vehicle priors."""
    return records_from_vehicle_poses(priors, truth.timestamps, anchor)
