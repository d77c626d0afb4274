"""Detection and repair of weakly reconstructed survey areas.

After the per-cluster pass, image pairs with many verified matches but few
shared triangulated landmarks mark places where the partition or the data
starved the reconstruction.  This module finds those pairs (and images that
registered nowhere), grows revisit clusters around them, and re-runs local
reconstruction a bounded number of times, merging results so per-edge
knowledge only ever improves.
"""

from dataclasses import dataclass, field

from .geometry import Pose, RigExtrinsics
from .camera import CameraIntrinsics
from .local_sfm import ReconstructionConfig, SubReconstruction, reconstruct_cluster
from .viewgraph import Cluster, ViewGraph

__all__ = [
    "WeakAreaConfig",
    "WeakReport",
    "build_revisit_clusters",
    "detect",
    "revisit",
]


@dataclass(frozen=True)
class WeakAreaConfig:
    """Thresholds for weak-pair detection and the revisit loop."""

    mu: int = 50
    weak_ratio: float = 0.2
    max_rounds: int = 2
    hops: int = 2
    merge_overlap: float = 0.5

    def __post_init__(self) -> None:
        if self.mu < 1:
            raise ValueError("mu must be a positive match count")
        if not 0.0 < self.weak_ratio < 1.0:
            raise ValueError("weak_ratio must be in (0, 1)")
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")
        if self.hops < 0:
            raise ValueError("hops must be >= 0")
        if not 0.0 < self.merge_overlap <= 1.0:
            raise ValueError("merge_overlap must be in (0, 1]")


@dataclass
class WeakReport:
    """Snapshot of reconstruction weakness across the survey.

    ``constraint_histogram`` counts, per image, the incident edges that
    carry a metric relative pose — the constraints available to the pose
    graph.  ``round_counts`` is filled by the revisit loop with one entry
    per executed detection."""

    weak_pairs: list[tuple[int, int]]
    unregistered: list[int]
    constraint_histogram: dict[int, int]
    round_counts: list[dict[str, int]] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.weak_pairs and not self.unregistered


def _is_weak(edge, cfg: WeakAreaConfig) -> bool:
    return edge.n_matches > cfg.mu and edge.n_points < cfg.weak_ratio * edge.n_matches


def detect(
    graph: ViewGraph, registered: set[int], cfg: WeakAreaConfig | None = None
) -> WeakReport:
    """Find weak pairs and unregistered images on an upgraded view graph.

    A pair is weak when it has more than ``mu`` verified matches yet fewer
    than ``weak_ratio`` of them became shared landmarks (strict
    inequalities on both sides).
    """
    cfg = cfg or WeakAreaConfig()
    weak = sorted(key for key, edge in graph.edges.items() if _is_weak(edge, cfg))
    unregistered = sorted(set(range(graph.image_count)) - set(registered))
    histogram = {i: 0 for i in range(graph.image_count)}
    for (a, b), edge in graph.edges.items():
        if edge.metric_rel_pose is not None:
            histogram[a] += 1
            histogram[b] += 1
    return WeakReport(
        weak_pairs=weak, unregistered=unregistered, constraint_histogram=histogram
    )


def _weak_components(report: WeakReport, graph: ViewGraph) -> list[set[int]]:
    """Connected components over the weak images, linked by weak pairs and
    by view-graph edges between two weak images."""
    nodes = {i for pair in report.weak_pairs for i in pair} | set(report.unregistered)
    if not nodes:
        return []
    adj: dict[int, set[int]] = {n: set() for n in nodes}
    for a, b in report.weak_pairs:
        adj[a].add(b)
        adj[b].add(a)
    for a, b in graph.edges:
        if a in nodes and b in nodes:
            adj[a].add(b)
            adj[b].add(a)
    components = []
    seen: set[int] = set()
    for start in sorted(nodes):
        if start in seen:
            continue
        comp = {start}
        frontier = [start]
        while frontier:
            node = frontier.pop()
            for nxt in adj[node]:
                if nxt not in comp:
                    comp.add(nxt)
                    frontier.append(nxt)
        seen |= comp
        components.append(comp)
    return components


def _expand(component: set[int], adjacency: dict[int, set[int]], hops: int) -> set[int]:
    out = set(component)
    frontier = set(component)
    for _ in range(hops):
        nxt = set()
        for node in frontier:
            nxt |= adjacency.get(node, set())
        nxt -= out
        if not nxt:
            break
        out |= nxt
        frontier = nxt
    return out


def build_revisit_clusters(
    report: WeakReport, graph: ViewGraph, cfg: WeakAreaConfig | None = None
) -> list[Cluster]:
    """Grow one cluster per weak component: the component plus everything
    within ``hops`` view-graph edges, merging clusters that overlap in more
    than ``merge_overlap`` of the smaller one."""
    cfg = cfg or WeakAreaConfig()
    adjacency = graph.adjacency()
    groups = [
        _expand(component, adjacency, cfg.hops)
        for component in _weak_components(report, graph)
    ]
    merged: list[set[int]] = []
    for group in groups:
        target = None
        for existing in merged:
            overlap = len(group & existing) / min(len(group), len(existing))
            if overlap > cfg.merge_overlap:
                target = existing
                break
        if target is None:
            merged.append(set(group))
        else:
            target |= group
    # a late merge can push two earlier groups over the threshold
    stable = False
    while not stable:
        stable = True
        for x in range(len(merged)):
            for y in range(x + 1, len(merged)):
                overlap = len(merged[x] & merged[y]) / min(len(merged[x]), len(merged[y]))
                if overlap > cfg.merge_overlap:
                    merged[x] |= merged.pop(y)
                    stable = False
                    break
            if not stable:
                break
    merged.sort(key=min)
    return [
        Cluster(cluster_id=k, members=sorted(group)) for k, group in enumerate(merged)
    ]


def _snapshot_edges(graph: ViewGraph, members: list[int]):
    member_set = set(members)
    return {
        key: (edge.n_points, edge.metric_rel_pose)
        for key, edge in graph.edges.items()
        if key[0] in member_set and key[1] in member_set
    }


def _restore_better(graph: ViewGraph, snapshot) -> None:
    for key, (n_points, rel) in snapshot.items():
        edge = graph.edges[key]
        if n_points > edge.n_points:
            edge.n_points = n_points
            edge.metric_rel_pose = rel


def revisit(
    graph: ViewGraph,
    reconstructions: list[SubReconstruction],
    vehicle_priors: dict[int, Pose],
    intrinsics: CameraIntrinsics,
    rig: RigExtrinsics,
    cfg: WeakAreaConfig | None = None,
    recon_cfg: ReconstructionConfig | None = None,
    reconstruct_fn=reconstruct_cluster,
) -> tuple[list[SubReconstruction], WeakReport]:
    """Re-reconstruct weak areas for up to ``max_rounds`` rounds.

    Each round detects weak items, builds revisit clusters, reconstructs
    them, and merges the outcome: new sub-reconstructions are appended
    (existing registrations are never dropped) and each edge keeps the
    upgrade with the larger shared-landmark count.  Returns the grown
    reconstruction list and a final report whose ``round_counts`` logs
    every detection made.
    """
    cfg = cfg or WeakAreaConfig()
    recon_cfg = recon_cfg or ReconstructionConfig()
    reconstructions = list(reconstructions)
    rounds: list[dict[str, int]] = []

    def _detect_and_log() -> WeakReport:
        registered = {img for recon in reconstructions for img in recon.poses}
        report = detect(graph, registered, cfg)
        rounds.append(
            {
                "round": len(rounds),
                "weak_pairs": len(report.weak_pairs),
                "unregistered": len(report.unregistered),
            }
        )
        return report

    final = _detect_and_log()
    for round_idx in range(cfg.max_rounds):
        if final.clean:
            break
        clusters = build_revisit_clusters(final, graph, cfg)
        if not clusters:
            break
        for k, cluster in enumerate(clusters):
            revisit_cluster = Cluster(
                cluster_id=(round_idx + 1) * 10_000 + k,
                members=cluster.members,
            )
            snapshot = _snapshot_edges(graph, cluster.members)
            recon = reconstruct_fn(
                revisit_cluster, graph, vehicle_priors, intrinsics, rig, recon_cfg
            )
            _restore_better(graph, snapshot)
            if recon.poses:
                reconstructions.append(recon)
        final = _detect_and_log()

    final.round_counts = rounds
    return reconstructions, final
