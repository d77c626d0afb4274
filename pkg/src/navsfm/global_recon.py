"""Survey-level reconstruction assembly and evaluation.

Feature tracks from every cluster reconstruction are merged with a
union-find over their observations, re-triangulated against the globally
optimized trajectory, refined by one survey-wide bundle adjustment, and
summarized into the evaluation metrics.  A direct-triangulation baseline
(no refinement at all) quantifies what the optimization stages buy.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bundle import BundleObservations, bundle_adjust
from .camera import CameraIntrinsics, project
from .geometry import Pose, RigExtrinsics
from .local_sfm import ReconstructionConfig, _track_key
from .triangulation import triangulate
from .viewgraph import ViewGraph

__all__ = [
    "DirectTriangulationReport",
    "GlobalReconstruction",
    "MetricsReport",
    "TrackMergeStats",
    "compute_metrics",
    "direct_triangulation_baseline",
    "global_ba",
    "match_tracks",
    "merge_tracks",
    "retriangulate",
]

TOO_FEW_OBSERVATIONS = "too_few_observations"
HIGH_REPROJECTION = "high_reprojection"


@dataclass(frozen=True)
class TrackMergeStats:
    source_tracks: int
    merged_tracks: int
    cross_cluster_links: int
    dropped_duplicates: int
    dropped_short: int


class _TrackForest:
    """Union-find over (image, feature) observation keys, join-ordered.

    The insertion order breaks every tie downstream: the earlier-joined
    observation wins image conflicts and names the merged track.
    """

    def __init__(self):
        self.parent: dict[tuple[int, int], tuple[int, int]] = {}
        self.order: dict[tuple[int, int], int] = {}
        self.pixels: dict[tuple[int, int], np.ndarray] = {}

    def add(self, key, pixel):
        if key not in self.parent:
            self.parent[key] = key
            self.order[key] = len(self.order)
            self.pixels[key] = np.asarray(pixel, dtype=np.float64)

    def find(self, key):
        root = key
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[key] != root:
            self.parent[key], key = root, self.parent[key]
        return root

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.order[rb] < self.order[ra]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        return True

    def tracks(self):
        groups: dict[tuple[int, int], list[tuple[int, int]]] = {}
        for key in self.parent:
            groups.setdefault(self.find(key), []).append(key)
        tracks: dict[int, list[tuple[int, int, np.ndarray]]] = {}
        dropped_duplicates = 0
        dropped_short = 0
        for keys in groups.values():
            keys.sort(key=lambda k: self.order[k])
            seen_images = set()
            obs = []
            for img, feat in keys:
                if img in seen_images:
                    dropped_duplicates += 1
                    continue
                seen_images.add(img)
                obs.append((img, feat, self.pixels[(img, feat)].copy()))
            if len(obs) < 2:
                dropped_short += 1
                continue
            tracks[_track_key(obs[0][0], obs[0][1])] = obs
        return tracks, dropped_duplicates, dropped_short


def merge_tracks(subrecons, graph: ViewGraph):
    """Union per-cluster tracks that observe the same physical feature.

    Observations are nodes; two observations join when a cluster already
    put them in one track or when a verified match in the view graph links
    them across clusters.  A merged track that would observe one image
    twice keeps the earlier-joined observation and drops the later one.

    Returns:
        (tracks, stats): ``tracks`` maps a stable landmark id (from the
        earliest observation) to its merged observation list.
    """
    forest = _TrackForest()
    source_tracks = 0
    for recon in subrecons:
        for lid in sorted(recon.tracks):
            source_tracks += 1
            first = None
            for img, feat, pixel in recon.tracks[lid]:
                key = (img, int(feat))
                forest.add(key, pixel)
                if first is None:
                    first = key
                else:
                    forest.union(first, key)

    links = 0
    for pair in sorted(graph.edges):
        edge = graph.edges[pair]
        for fi, fj in zip(edge.feat_i, edge.feat_j):
            ka = (edge.i, int(fi))
            kb = (edge.j, int(fj))
            if ka in forest.parent and kb in forest.parent and forest.union(ka, kb):
                links += 1

    tracks, dropped_duplicates, dropped_short = forest.tracks()
    stats = TrackMergeStats(
        source_tracks=source_tracks,
        merged_tracks=len(tracks),
        cross_cluster_links=links,
        dropped_duplicates=dropped_duplicates,
        dropped_short=dropped_short,
    )
    return tracks, stats


def match_tracks(graph: ViewGraph):
    """Feature tracks chained directly from the verified pairwise matches.

    This is the raw material for the direct-triangulation baseline: no
    reconstruction stage has filtered it yet, so every mismatch that
    survived geometric verification is still present.
    """
    forest = _TrackForest()
    for pair in sorted(graph.edges):
        edge = graph.edges[pair]
        for fi, fj, pi, pj in zip(edge.feat_i, edge.feat_j, edge.pix_i, edge.pix_j):
            ka = (edge.i, int(fi))
            kb = (edge.j, int(fj))
            forest.add(ka, pi)
            forest.add(kb, pj)
            forest.union(ka, kb)
    tracks, _, _ = forest.tracks()
    return tracks


def _triangulate_track(obs, poses, intrinsics, min_angle_deg, max_reproj_px):
    usable = [(img, feat, pix) for img, feat, pix in obs if img in poses]
    if len(usable) < 2:
        return None, TOO_FEW_OBSERVATIONS
    result = triangulate(
        [(poses[img], intrinsics, pix) for img, _, pix in usable],
        min_angle_deg=min_angle_deg,
    )
    if not result.ok:
        return None, result.status
    if not result.mean_reproj_px <= max_reproj_px:
        return None, HIGH_REPROJECTION
    return result.point, None


def retriangulate(
    tracks,
    poses: dict[int, Pose],
    intrinsics: CameraIntrinsics,
    config: ReconstructionConfig | None = None,
    max_reproj_px: float | None = None,
    threads: int = 1,
):
    """Triangulate every merged track against the optimized poses.

    Tracks that fail the angle/cheirality/reprojection gates are dropped
    and recorded with their reason code, never raised as errors.

    Returns:
        (landmarks, dropped): position per surviving track id, reason code
        per dropped track id.
    """
    config = config or ReconstructionConfig()
    gate = config.max_point_reproj_px if max_reproj_px is None else max_reproj_px
    lids = sorted(tracks)

    def work(lid):
        return _triangulate_track(
            tracks[lid], poses, intrinsics, config.min_triangulation_angle_deg, gate
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(work, lids))
    else:
        outcomes = [work(lid) for lid in lids]

    landmarks: dict[int, np.ndarray] = {}
    dropped: dict[int, str] = {}
    for lid, (point, reason) in zip(lids, outcomes):
        if reason is None:
            landmarks[lid] = point
        else:
            dropped[lid] = reason
    return landmarks, dropped


def _mean_reprojection_px(poses, landmarks, tracks, intrinsics) -> float:
    """Mean reprojection-residual norm over all projectable observations."""
    norms = []
    for lid in sorted(landmarks):
        point = landmarks[lid]
        for img, _, pixel in tracks[lid]:
            pose = poses.get(img)
            if pose is None:
                continue
            pix = project(point, intrinsics, pose)
            if pix is None:
                continue
            norms.append(float(np.linalg.norm(pix - pixel)))
    return float(np.mean(norms)) if norms else float("nan")


def _mean_track_length(landmarks, tracks) -> float:
    counts = [len(tracks[lid]) for lid in landmarks]
    return float(np.mean(counts)) if counts else float("nan")


@dataclass
class GlobalReconstruction:
    """The survey-wide model: trajectory, merged structure, calibration.

    ``registered`` holds the status of every survey image; summary
    statistics are stored alongside and must stay reproducible from the
    stored data (see ``mean_reprojection_px`` / ``mean_track_length``).
    """

    poses: dict[int, Pose]
    landmarks: dict[int, np.ndarray]
    tracks: dict[int, list[tuple[int, int, np.ndarray]]]
    registered: dict[int, bool]
    intrinsics: CameraIntrinsics
    rig: RigExtrinsics
    reported_re_px: float = float("nan")
    reported_track_length: float = float("nan")
    ba_converged: bool = False
    ba_message: str = ""

    def __post_init__(self) -> None:
        for lid in self.landmarks:
            if len(self.tracks.get(lid, ())) < 2:
                raise ValueError(f"landmark {lid} has fewer than two observations")
        registered_imgs = {img for img, ok in self.registered.items() if ok}
        if not set(self.poses) <= set(self.registered):
            raise ValueError("poses reference images outside the survey")
        if set(self.poses) != registered_imgs:
            raise ValueError("registration status disagrees with the pose set")

    def mean_reprojection_px(self) -> float:
        return _mean_reprojection_px(self.poses, self.landmarks, self.tracks, self.intrinsics)

    def mean_track_length(self) -> float:
        return _mean_track_length(self.landmarks, self.tracks)


def _consistent_subset(poses, landmarks, tracks):
    """Tracks restricted to registered observations, landmarks kept only
    while they retain >= 2 observations."""
    out_tracks = {}
    out_landmarks = {}
    for lid in sorted(landmarks):
        obs = [(img, feat, pix) for img, feat, pix in tracks[lid] if img in poses]
        if len(obs) >= 2:
            out_tracks[lid] = obs
            out_landmarks[lid] = landmarks[lid]
    return out_landmarks, out_tracks


def global_ba(
    recon: GlobalReconstruction,
    vehicle_priors: dict[int, Pose],
    config: ReconstructionConfig | None = None,
) -> GlobalReconstruction:
    """One survey-wide bundle adjustment over the merged reconstruction.

    Unlike the per-cluster stage, shared intrinsics and the rig offset are
    refined by default; navigation priors keep the gauge anchored.
    """
    if config is None:
        config = ReconstructionConfig(refine_intrinsics=True, refine_rig=True)
    landmarks, tracks = _consistent_subset(recon.poses, recon.landmarks, recon.tracks)
    images = sorted(recon.poses)
    img_index = {img: k for k, img in enumerate(images)}
    lm_ids = sorted(landmarks)
    lm_index = {lid: k for k, lid in enumerate(lm_ids)}
    cam_idx, lm_idx, pix = [], [], []
    for lid in lm_ids:
        for img, _, pixel in tracks[lid]:
            cam_idx.append(img_index[img])
            lm_idx.append(lm_index[lid])
            pix.append(pixel)
    result = bundle_adjust(
        [recon.poses[img] for img in images],
        np.array([landmarks[lid] for lid in lm_ids]).reshape(-1, 3),
        BundleObservations(cam_idx, lm_idx, pix),
        recon.intrinsics,
        priors=[vehicle_priors.get(img) for img in images],
        prior_weights=config.prior_weights(),
        rig=recon.rig,
        options=config.bundle_options(),
    )
    poses = {img: result.poses[img_index[img]] for img in images}
    new_landmarks = {lid: result.landmarks[lm_index[lid]].copy() for lid in lm_ids}
    refined = GlobalReconstruction(
        poses=poses,
        landmarks=new_landmarks,
        tracks=tracks,
        registered=dict(recon.registered),
        intrinsics=result.intrinsics,
        rig=result.rig,
        ba_converged=result.converged,
        ba_message=result.message,
    )
    refined.reported_re_px = refined.mean_reprojection_px()
    refined.reported_track_length = refined.mean_track_length()
    return refined


@dataclass
class DirectTriangulationReport:
    """Triangulation-only baseline: structure quality without any BA."""

    mode: str
    landmark_count: int
    track_count: int
    dropped: dict[str, int]
    mean_reprojection_px: float
    mean_track_length: float


def direct_triangulation_baseline(
    mode: str,
    tracks,
    intrinsics: CameraIntrinsics,
    prior_poses: dict[int, Pose] | None = None,
    pgo_poses: dict[int, Pose] | None = None,
    inlier_tracks=None,
    min_angle_deg: float = 1.0,
) -> DirectTriangulationReport:
    """Triangulate all tracks against one pose source, with no refinement.

    Modes: ``priors`` uses the navigation-derived camera poses, ``pgo`` the
    globally optimized ones, and ``pgo_inlier`` the optimized poses on the
    outlier-free track subset (``inlier_tracks``).  Only the degeneracy and
    cheirality gates apply — there is deliberately no reprojection gate, so
    the report shows the full error of the pose source.
    """
    if mode == "priors":
        if prior_poses is None:
            raise ValueError("mode 'priors' needs prior_poses")
        poses, selected = prior_poses, tracks
    elif mode == "pgo":
        if pgo_poses is None:
            raise ValueError("mode 'pgo' needs pgo_poses")
        poses, selected = pgo_poses, tracks
    elif mode == "pgo_inlier":
        if pgo_poses is None or inlier_tracks is None:
            raise ValueError("mode 'pgo_inlier' needs pgo_poses and inlier_tracks")
        poses, selected = pgo_poses, inlier_tracks
    else:
        raise ValueError(f"unknown mode {mode!r}; expected priors, pgo, or pgo_inlier")

    landmarks, dropped = retriangulate(
        selected,
        poses,
        intrinsics,
        max_reproj_px=float("inf"),
        config=ReconstructionConfig(min_triangulation_angle_deg=min_angle_deg),
    )
    reasons: dict[str, int] = {}
    for code in dropped.values():
        reasons[code] = reasons.get(code, 0) + 1
    return DirectTriangulationReport(
        mode=mode,
        landmark_count=len(landmarks),
        track_count=len(selected),
        dropped=reasons,
        mean_reprojection_px=_mean_reprojection_px(poses, landmarks, selected, intrinsics),
        mean_track_length=_mean_track_length(landmarks, selected),
    )


@dataclass
class MetricsReport:
    """Survey-level evaluation summary."""

    registered_count: int
    image_count: int
    mean_track_length: float
    mean_reprojection_px: float
    ate_rmse_m: float
    ate_truth_rmse_m: float | None = None
    stage_seconds: dict[str, float] = field(default_factory=dict)
    weak_history: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.registered_count > self.image_count:
            raise ValueError("registered count cannot exceed the image count")
        for name in ("mean_track_length", "mean_reprojection_px", "ate_rmse_m"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.ate_truth_rmse_m is not None and not np.isfinite(self.ate_truth_rmse_m):
            raise ValueError("ate_truth_rmse_m must be finite")

    def to_dict(self) -> dict:
        return {
            "registered_count": self.registered_count,
            "image_count": self.image_count,
            "mean_track_length": self.mean_track_length,
            "mean_reprojection_px": self.mean_reprojection_px,
            "ate_rmse_m": self.ate_rmse_m,
            "ate_truth_rmse_m": self.ate_truth_rmse_m,
            "stage_seconds": dict(self.stage_seconds),
            "weak_history": list(self.weak_history),
        }


def _ate_rmse(poses: dict[int, Pose], reference: dict[int, Pose]) -> float:
    """RMSE of camera-center differences, identity alignment (both inputs
    live in the same metric, geo-anchored frame)."""
    common = sorted(set(poses) & set(reference))
    if not common:
        return float("nan")
    diffs = np.array([poses[i].center() - reference[i].center() for i in common])
    return float(np.sqrt(np.mean(np.sum(diffs**2, axis=1))))


def compute_metrics(
    recon: GlobalReconstruction,
    reference_poses: dict[int, Pose],
    truth_poses: dict[int, Pose] | None = None,
    stage_seconds: dict[str, float] | None = None,
    weak_history: list[dict] | None = None,
) -> MetricsReport:
    """Evaluate a reconstruction against the reference trajectory.

    ``reference_poses`` is usually the navigation-derived camera trajectory;
    pass simulator truth as ``truth_poses`` for the additional ground-truth
    ATE.  No similarity alignment is applied anywhere: the reconstruction is
    already metric in the reference frame.
    """
    return MetricsReport(
        registered_count=sum(1 for ok in recon.registered.values() if ok),
        image_count=len(recon.registered),
        mean_track_length=recon.mean_track_length(),
        mean_reprojection_px=recon.mean_reprojection_px(),
        ate_rmse_m=_ate_rmse(recon.poses, reference_poses),
        ate_truth_rmse_m=None if truth_poses is None else _ate_rmse(recon.poses, truth_poses),
        stage_seconds=dict(stage_seconds or {}),
        weak_history=list(weak_history or []),
    )
