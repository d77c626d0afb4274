"""Navigation-aided incremental reconstruction of one image cluster.

Seeds from the strongest verified pair with the two views placed at metric
scale using their pose priors, then alternates image registration
(RANSAC absolute pose on 2D-3D matches), track triangulation, and
prior-supervised bundle adjustment.  The reconstruction lives in the prior
coordinate frame from the seed pair onward; a closed-form similarity
re-anchor after each bundle pass keeps it pinned there when noisy priors
are too weak to hold a rigid cluster in place on their own.
"""

from dataclasses import dataclass, field

import numpy as np

from .absolute_pose import ransac_pnp
from .bundle import BundleObservations, BundleOptions, bundle_adjust
from .camera import CameraIntrinsics, project, unproject
from .geometry import (
    Pose,
    ResidualWeights,
    RigExtrinsics,
    compose,
    inverse,
    nav_to_camera_prior,
    quat_conjugate,
    quat_multiply,
)
from .triangulation import triangulate
from .viewgraph import Cluster, ViewGraph

__all__ = [
    "ReconstructionConfig",
    "SubReconstruction",
    "initialize_pair",
    "reconstruct_cluster",
    "register_image",
]


@dataclass(frozen=True)
class ReconstructionConfig:
    """Knobs for per-cluster reconstruction and its bundle adjustments."""

    min_seed_baseline_m: float = 0.05
    min_seed_parallax_deg: float = 1.0
    min_seed_survival: float = 0.5
    min_2d3d: int = 6
    pnp_threshold_rad: float = 8e-3
    min_triangulation_angle_deg: float = 1.0
    max_point_reproj_px: float = 4.0
    robust_width_px: float = 2.0
    prior_rot_weight: float = 1.0
    prior_trans_weight: float = 1.0
    refine_intrinsics: bool = False
    refine_rig: bool = False
    ba_max_iterations: int = 30
    seed: int = 0

    def prior_weights(self) -> ResidualWeights:
        return ResidualWeights.isotropic(self.prior_rot_weight, self.prior_trans_weight)

    def bundle_options(self) -> BundleOptions:
        return BundleOptions(
            max_iterations=self.ba_max_iterations,
            robust_width_px=self.robust_width_px,
            refine_intrinsics=self.refine_intrinsics,
            refine_rig=self.refine_rig,
        )


@dataclass
class SubReconstruction:
    """One cluster's metric reconstruction in the prior coordinate frame.

    ``tracks`` maps landmark id -> list of (image id, feature id, pixel);
    every landmark in ``landmarks`` has >= 2 observations on registered
    images.  ``failed`` lists images that were attempted but never reached
    the registration threshold; ``reported_rms_px`` is the reprojection
    RMS published with the reconstruction.
    """

    cluster_id: int
    poses: dict[int, Pose] = field(default_factory=dict)
    landmarks: dict[int, np.ndarray] = field(default_factory=dict)
    tracks: dict[int, list[tuple[int, int, np.ndarray]]] = field(default_factory=dict)
    failed: list[int] = field(default_factory=list)
    reported_rms_px: float = float("nan")

    @property
    def registered_images(self) -> list[int]:
        return sorted(self.poses)

    def observation_count(self) -> int:
        return sum(len(t) for t in self.tracks.values())

    def reprojection_rms_px(self, intrinsics: CameraIntrinsics) -> float:
        """RMS reprojection error recomputed from stored poses/landmarks."""
        sq_sum = 0.0
        count = 0
        for lid, obs_list in self.tracks.items():
            point = self.landmarks[lid]
            for img, _, pixel in obs_list:
                pix = project(point, intrinsics, self.poses[img])
                if pix is None:
                    continue
                sq_sum += float(np.sum((pix - pixel) ** 2))
                count += 1
        return float(np.sqrt(sq_sum / count)) if count else float("nan")


def _track_key(image_id: int, feature_id: int) -> int:
    """Stable landmark id from the observation that spawned the track."""
    return image_id * 1_000_000 + feature_id


def initialize_pair(
    edge,
    cam_priors: dict[int, Pose],
    intrinsics: CameraIntrinsics,
    config: ReconstructionConfig | None = None,
    cluster_id: int = 0,
) -> SubReconstruction:
    """Seed a reconstruction from one verified edge.

    The first camera is placed exactly at its camera-frame prior; the
    edge's unit-translation relative pose is scaled so the baseline equals
    the prior baseline, which fixes metric scale without any alignment.
    Raises ValueError when the prior baseline is too short to define scale
    or when the matches are explained by rotation alone — a parallax-free
    pair carries no translation information, and a noisy prior baseline
    would scale its fictional direction into fictional structure (callers
    should try the next candidate edge).
    """
    config = config or ReconstructionConfig()
    prior_i = cam_priors[edge.i]
    prior_j = cam_priors[edge.j]
    baseline = float(np.linalg.norm(prior_j.center() - prior_i.center()))
    if baseline < config.min_seed_baseline_m:
        raise ValueError(
            f"prior baseline {baseline:.4f} m between images {edge.i} and {edge.j} "
            f"is below the {config.min_seed_baseline_m} m floor; scale is undefined"
        )
    rays_i = unproject(edge.pix_i, intrinsics)
    rays_j = unproject(edge.pix_j, intrinsics)
    rotated = rays_i @ edge.rel_pose.rotation().T
    cosang = np.clip(np.sum(rotated * rays_j, axis=1), -1.0, 1.0)
    parallax = float(np.degrees(np.median(np.arccos(cosang))))
    if parallax < config.min_seed_parallax_deg:
        raise ValueError(
            f"images {edge.i} and {edge.j} show {parallax:.3f} deg median parallax, "
            f"below the {config.min_seed_parallax_deg} deg floor; translation is undefined"
        )

    pose_i = prior_i.copy()
    rel = Pose(edge.rel_pose.q.copy(), edge.rel_pose.t * baseline)
    pose_j = compose(rel, pose_i)

    recon = SubReconstruction(cluster_id=cluster_id)
    recon.poses[edge.i] = pose_i
    recon.poses[edge.j] = pose_j

    for fi, fj, pi, pj in zip(edge.feat_i, edge.feat_j, edge.pix_i, edge.pix_j):
        result = triangulate(
            [(pose_i, intrinsics, pi), (pose_j, intrinsics, pj)],
            min_angle_deg=config.min_triangulation_angle_deg,
        )
        if not result.ok or result.mean_reproj_px > config.max_point_reproj_px:
            continue
        lid = _track_key(edge.i, int(fi))
        recon.landmarks[lid] = result.point
        recon.tracks[lid] = [
            (edge.i, int(fi), np.asarray(pi, dtype=np.float64)),
            (edge.j, int(fj), np.asarray(pj, dtype=np.float64)),
        ]
    return recon


def register_image(
    recon: SubReconstruction,
    image_id: int,
    correspondences: list[tuple[int, int, np.ndarray]],
    intrinsics: CameraIntrinsics,
    config: ReconstructionConfig | None = None,
    seed: int = 0,
) -> Pose | None:
    """Resect one image from (landmark id, feature id, pixel) matches.

    On success the refined pose is stored, the RANSAC-inlier
    correspondences are appended to their tracks, and the pose is
    returned.  Below-threshold support returns None and records the
    failure for a later revisit.
    """
    config = config or ReconstructionConfig()
    if len(correspondences) < config.min_2d3d:
        if image_id not in recon.failed:
            recon.failed.append(image_id)
        return None
    points = np.array([recon.landmarks[lid] for lid, _, _ in correspondences])
    pixels = np.array([pix for _, _, pix in correspondences], dtype=np.float64)
    rays = unproject(pixels, intrinsics)
    result = ransac_pnp(
        points,
        rays,
        threshold_rad=config.pnp_threshold_rad,
        min_inliers=config.min_2d3d,
        seed=seed,
    )
    if result is None:
        if image_id not in recon.failed:
            recon.failed.append(image_id)
        return None
    pose = result.pose
    recon.poses[image_id] = pose
    for k in np.nonzero(result.inlier_mask)[0]:
        lid, feat, pixel = correspondences[k]
        track = recon.tracks[lid]
        if not any(img == image_id for img, _, _ in track):
            track.append((image_id, int(feat), np.asarray(pixel, dtype=np.float64)))
    if image_id in recon.failed:
        recon.failed.remove(image_id)
    return pose


class _ClusterBook:
    """Match bookkeeping for one cluster's incremental loop.

    ``partners`` maps (image, feature) to the features it matched in other
    cluster images; ``candidates`` accumulates, per unregistered image, the
    landmarks currently observable through a registered neighbor.
    """

    def __init__(self, cluster_images, graph: ViewGraph):
        members = set(cluster_images)
        self.pixels: dict[int, dict[int, np.ndarray]] = {i: {} for i in cluster_images}
        self.partners: dict[tuple[int, int], list[tuple[int, int]]] = {}
        self.by_image: dict[int, list[tuple[int, int, int]]] = {i: [] for i in cluster_images}
        self.edges = []
        for (a, b), edge in sorted(graph.edges.items()):
            if a not in members or b not in members:
                continue
            self.edges.append(edge)
            for fi, fj, pi, pj in zip(edge.feat_i, edge.feat_j, edge.pix_i, edge.pix_j):
                fi, fj = int(fi), int(fj)
                self.pixels[a][fi] = np.asarray(pi, dtype=np.float64)
                self.pixels[b][fj] = np.asarray(pj, dtype=np.float64)
                self.partners.setdefault((a, fi), []).append((b, fj))
                self.partners.setdefault((b, fj), []).append((a, fi))
                self.by_image[a].append((fi, b, fj))
                self.by_image[b].append((fj, a, fi))
        self.landmark_of: dict[tuple[int, int], int] = {}
        self.candidates: dict[int, dict[int, tuple[int, np.ndarray]]] = {
            i: {} for i in cluster_images
        }

    def assign(self, recon: SubReconstruction, image: int, feat: int, lid: int) -> None:
        """Bind (image, feature) to a landmark and offer that landmark as a
        2D-3D candidate to every unregistered image matching the feature."""
        self.landmark_of[(image, feat)] = lid
        for other, ofeat in self.partners.get((image, feat), ()):
            if other not in recon.poses:
                self.candidates[other].setdefault(lid, (ofeat, self.pixels[other][ofeat]))


def _run_bundle(recon: SubReconstruction, intrinsics, vehicle_priors, rig, config):
    """Bundle-adjust the current reconstruction state in place."""
    images = recon.registered_images
    img_index = {img: k for k, img in enumerate(images)}
    lm_ids = sorted(recon.landmarks)
    lm_index = {lid: k for k, lid in enumerate(lm_ids)}
    cam_idx, lm_idx, pixels = [], [], []
    for lid in lm_ids:
        for img, _, pixel in recon.tracks[lid]:
            cam_idx.append(img_index[img])
            lm_idx.append(lm_index[lid])
            pixels.append(pixel)
    obs = BundleObservations(cam_idx, lm_idx, pixels)
    result = bundle_adjust(
        [recon.poses[img] for img in images],
        np.array([recon.landmarks[lid] for lid in lm_ids]),
        obs,
        intrinsics,
        priors=[vehicle_priors.get(img) for img in images],
        prior_weights=config.prior_weights(),
        rig=rig,
        options=config.bundle_options(),
    )
    for img, pose in zip(images, result.poses):
        recon.poses[img] = pose
    for lid, point in zip(lm_ids, result.landmarks):
        recon.landmarks[lid] = point
    return result


def _grow_tracks(
    recon: SubReconstruction,
    book: _ClusterBook,
    new_image: int,
    intrinsics,
    config,
) -> None:
    """Extend tracks through the newly registered image and triangulate
    fresh two-view tracks against already-registered neighbors."""
    for feat, other, ofeat in book.by_image[new_image]:
        if other not in recon.poses:
            continue
        lid_self = book.landmark_of.get((new_image, feat))
        lid_other = book.landmark_of.get((other, ofeat))
        if lid_self is not None and lid_other is not None:
            continue
        if lid_other is not None:
            track = recon.tracks.get(lid_other)
            if track is not None and not any(img == new_image for img, _, _ in track):
                track.append((new_image, feat, book.pixels[new_image][feat]))
                book.assign(recon, new_image, feat, lid_other)
        elif lid_self is not None:
            track = recon.tracks.get(lid_self)
            if track is not None and not any(img == other for img, _, _ in track):
                track.append((other, ofeat, book.pixels[other][ofeat]))
                book.assign(recon, other, ofeat, lid_self)
        else:
            pix_n = book.pixels[new_image][feat]
            pix_o = book.pixels[other][ofeat]
            result = triangulate(
                [
                    (recon.poses[new_image], intrinsics, pix_n),
                    (recon.poses[other], intrinsics, pix_o),
                ],
                min_angle_deg=config.min_triangulation_angle_deg,
            )
            if not result.ok or result.mean_reproj_px > config.max_point_reproj_px:
                continue
            lid = _track_key(new_image, feat)
            recon.landmarks[lid] = result.point
            recon.tracks[lid] = [
                (new_image, feat, pix_n),
                (other, ofeat, pix_o),
            ]
            book.assign(recon, new_image, feat, lid)
            book.assign(recon, other, ofeat, lid)


def _upgrade_edges(recon: SubReconstruction, book: _ClusterBook) -> None:
    """Write shared-landmark counts and metric relative poses onto every
    intra-cluster edge whose endpoints both registered.

    A match contributes to the count only when both of its features map to
    the same surviving landmark, so the count never exceeds the edge's
    match count.
    """
    for edge in book.edges:
        a, b = edge.i, edge.j
        if a not in recon.poses or b not in recon.poses:
            continue
        n_p = 0
        for fa, fb in zip(edge.feat_i, edge.feat_j):
            la = book.landmark_of.get((a, int(fa)))
            if la is None or la not in recon.landmarks:
                continue
            if la == book.landmark_of.get((b, int(fb))):
                n_p += 1
        edge.n_points = n_p
        edge.metric_rel_pose = compose(recon.poses[b], inverse(recon.poses[a]))


def _prune_underconstrained(recon: SubReconstruction) -> None:
    """Drop landmarks left with fewer than two observations on registered
    images."""
    for lid in list(recon.tracks):
        obs_list = [o for o in recon.tracks[lid] if o[0] in recon.poses]
        if len(obs_list) < 2:
            del recon.tracks[lid]
            del recon.landmarks[lid]
        else:
            recon.tracks[lid] = obs_list


def _align_to_priors(recon: SubReconstruction, cam_priors: dict[int, Pose]) -> None:
    """Re-anchor the reconstruction onto its camera priors with a
    world-frame similarity, in place.

    Reprojection residuals are invariant under a common rotation,
    translation, and scaling of all poses and landmarks, so the bundle's
    pixel terms exert no force along those seven directions and the prior
    terms alone must hold them.  When the priors are noisy the optimizer
    can stall with the whole cluster tilted or scaled as a block — a state
    the per-camera prior pulls are too weak to undo but a closed-form
    alignment removes exactly.  Rotation comes from averaging the
    per-camera frame corrections, scale and translation from a least
    squares fit of the camera centers to the prior centers.  Degenerate
    inputs (fewer than two priors, coincident centers) leave the
    reconstruction untouched.
    """
    imgs = [img for img in sorted(recon.poses) if img in cam_priors]
    if len(imgs) < 2:
        return
    quats = []
    for img in imgs:
        q = quat_multiply(quat_conjugate(recon.poses[img].q), cam_priors[img].q)
        if quats and float(q @ quats[0]) < 0.0:
            q = -q
        quats.append(q)
    stacked = np.array(quats)
    _, vecs = np.linalg.eigh(stacked.T @ stacked)
    q_corr = vecs[:, -1]
    rot_corr = Pose(q_corr, np.zeros(3)).rotation()

    centers = np.array([recon.poses[img].center() for img in imgs])
    prior_centers = np.array([cam_priors[img].center() for img in imgs])
    rotated = centers @ rot_corr  # each row is rot_corr.T @ center
    dev = rotated - rotated.mean(axis=0)
    dev_prior = prior_centers - prior_centers.mean(axis=0)
    spread = float(np.sum(dev * dev))
    if spread < 1e-12:
        return
    inv_scale = float(np.sum(dev * dev_prior)) / spread
    if inv_scale < 1e-6:
        return
    scale = 1.0 / inv_scale
    offset = rotated.mean(axis=0) - scale * prior_centers.mean(axis=0)

    for img in list(recon.poses):
        pose = recon.poses[img]
        center = rot_corr.T @ inverse(pose).t
        new_center = (center - offset) / scale
        q_new = quat_multiply(pose.q, q_corr)
        rot_new = Pose(q_new, np.zeros(3)).rotation()
        recon.poses[img] = Pose(q_new, -rot_new @ new_center)
    for lid in list(recon.landmarks):
        recon.landmarks[lid] = (rot_corr.T @ recon.landmarks[lid] - offset) / scale


def _image_seed(seed: int, cluster_id: int, image_id: int) -> int:
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(cluster_id, image_id))
    return int(seq.generate_state(1)[0])


def reconstruct_cluster(
    cluster: Cluster,
    graph: ViewGraph,
    vehicle_priors: dict[int, Pose],
    intrinsics: CameraIntrinsics,
    rig: RigExtrinsics,
    config: ReconstructionConfig | None = None,
) -> SubReconstruction:
    """Incrementally reconstruct one cluster.

    Seeds from the highest-match edge with an adequate prior baseline,
    registers remaining images best-supported-first, triangulates new
    tracks as coverage grows, bundle-adjusts periodically and at the end,
    then upgrades the cluster's view-graph edges in place.  Images that
    never reach the 2D-3D minimum are recorded in ``failed`` for revisit.
    """
    config = config or ReconstructionConfig()
    members = set(cluster.members)
    cam_priors = {
        img: nav_to_camera_prior(p, rig)
        for img, p in vehicle_priors.items()
        if img in members
    }
    book = _ClusterBook(cluster.members, graph)

    seed_order = sorted(book.edges, key=lambda e: (-e.n_matches, e.i, e.j))
    recon = SubReconstruction(cluster_id=cluster.cluster_id)
    for edge in seed_order:
        try:
            candidate = initialize_pair(edge, cam_priors, intrinsics, config, cluster.cluster_id)
        except ValueError:
            continue
        # a healthy seed hypothesis explains most of its own matches; low
        # survival means the prior-scaled geometry contradicts the pair
        enough = max(config.min_2d3d, int(config.min_seed_survival * edge.n_matches))
        if len(candidate.landmarks) >= enough:
            recon = candidate
            break
    if not recon.poses:
        recon.failed = sorted(members)
        return recon

    for lid, obs_list in recon.tracks.items():
        for img, feat, _ in obs_list:
            book.assign(recon, img, feat, lid)
    _run_bundle(recon, intrinsics, vehicle_priors, rig, config)
    _align_to_priors(recon, cam_priors)
    last_ba_count = len(recon.poses)

    remaining = members - set(recon.poses)
    attempted_at: dict[int, int] = {}
    while remaining:
        # an image is worth (re)trying only while its candidate pool has
        # grown since the last failed attempt; each failure raises the bar,
        # so the loop always terminates
        eligible = [
            img
            for img in remaining
            if len(book.candidates[img]) >= config.min_2d3d
            and len(book.candidates[img]) > attempted_at.get(img, -1)
        ]
        if not eligible:
            for img in sorted(remaining):
                if img not in recon.failed:
                    recon.failed.append(img)
            break
        best_img = max(eligible, key=lambda img: (len(book.candidates[img]), -img))
        corr = [
            (lid, feat, pixel)
            for lid, (feat, pixel) in sorted(book.candidates[best_img].items())
            if lid in recon.landmarks
        ]
        if len(corr) < config.min_2d3d:
            attempted_at[best_img] = len(book.candidates[best_img])
            continue
        pose = register_image(
            recon,
            best_img,
            corr,
            intrinsics,
            config,
            seed=_image_seed(config.seed, cluster.cluster_id, best_img),
        )
        if pose is None:
            attempted_at[best_img] = len(book.candidates[best_img])
            continue
        remaining.discard(best_img)
        del book.candidates[best_img]
        for lid, feat, pixel in corr:
            track = recon.tracks.get(lid)
            if track is not None and any(
                img == best_img and f == feat for img, f, _ in track
            ):
                book.assign(recon, best_img, feat, lid)
        _grow_tracks(recon, book, best_img, intrinsics, config)
        if len(recon.poses) - last_ba_count >= max(10, int(0.1 * len(recon.poses))):
            _run_bundle(recon, intrinsics, vehicle_priors, rig, config)
            _align_to_priors(recon, cam_priors)
            last_ba_count = len(recon.poses)

    _prune_underconstrained(recon)
    _run_bundle(recon, intrinsics, vehicle_priors, rig, config)
    _align_to_priors(recon, cam_priors)
    recon.failed = sorted(set(recon.failed) - set(recon.poses))
    recon.reported_rms_px = recon.reprojection_rms_px(intrinsics)
    _upgrade_edges(recon, book)
    return recon
