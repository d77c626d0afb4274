"""Match-graph construction and normalized-cut partitioning.

Candidate pairs come from prior-pose proximity, each pair is verified with
the calibrated five-point RANSAC, and the resulting inlier-weighted graph
is split into size-bounded clusters by recursive spectral bisection with a
sweep cut, optionally expanded so neighboring clusters share images.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .camera import CameraIntrinsics, unproject
from .geometry import Pose
from .io_formats import MatchSet, PairMatches
from .two_view import ransac_essential

__all__ = [
    "Cluster",
    "ViewGraph",
    "ViewGraphEdge",
    "build_view_graph",
    "partition",
    "select_pairs",
    "verify_two_view",
    "write_viewgraph_summary",
]


@dataclass
class ViewGraphEdge:
    """Verified two-view relation between images ``i < j``.

    ``n_matches`` counts RANSAC inliers; the correspondence arrays keep the
    surviving feature ids and pixel positions from both images.
    ``n_points`` stays 0 until a reconstruction upgrades the edge with the
    number of shared triangulated landmarks and a metric relative pose.
    """

    i: int
    j: int
    n_matches: int
    feat_i: np.ndarray
    feat_j: np.ndarray
    pix_i: np.ndarray
    pix_j: np.ndarray
    rel_pose: Pose
    n_points: int = 0
    metric_rel_pose: Pose | None = None

    def __post_init__(self) -> None:
        if self.i >= self.j:
            raise ValueError(f"edge endpoints must satisfy i < j, got ({self.i}, {self.j})")
        if self.n_matches < 0 or self.n_points < 0:
            raise ValueError("match and point counts must be non-negative")
        if len(self.feat_i) != self.n_matches or len(self.feat_j) != self.n_matches:
            raise ValueError("correspondence arrays must have n_matches entries")
        if abs(np.linalg.norm(self.rel_pose.t) - 1.0) > 1e-9:
            raise ValueError("relative translation direction must be unit-norm")


@dataclass
class Cluster:
    """One partition cell: ``members`` lists every image the cluster
    reconstructs, ``overlap`` the subset borrowed from neighboring clusters."""

    cluster_id: int
    members: list[int]
    overlap: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("cluster must contain at least one image")
        if not set(self.overlap) <= set(self.members):
            raise ValueError("overlap images must be cluster members")

    @property
    def core(self) -> list[int]:
        return sorted(set(self.members) - set(self.overlap))


class ViewGraph:
    """Undirected image graph with one ViewGraphEdge per verified pair."""

    def __init__(self, image_count: int):
        self.image_count = int(image_count)
        self.edges: dict[tuple[int, int], ViewGraphEdge] = {}

    @staticmethod
    def key(i: int, j: int) -> tuple[int, int]:
        return (i, j) if i < j else (j, i)

    def add_edge(self, edge: ViewGraphEdge) -> None:
        self.edges[(edge.i, edge.j)] = edge

    def edge(self, i: int, j: int) -> ViewGraphEdge | None:
        return self.edges.get(self.key(i, j))

    def neighbors(self, i: int) -> list[int]:
        out = [b if a == i else a for (a, b) in self.edges if i in (a, b)]
        return sorted(out)

    def degree(self, i: int) -> int:
        return sum(1 for (a, b) in self.edges if i in (a, b))

    def adjacency(self) -> dict[int, set[int]]:
        adj: dict[int, set[int]] = {i: set() for i in range(self.image_count)}
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        return adj

    def connected_images(self) -> list[int]:
        seen: set[int] = set()
        for a, b in self.edges:
            seen.add(a)
            seen.add(b)
        return sorted(seen)

    def weight_matrix(self, nodes: list[int]) -> np.ndarray:
        index = {node: k for k, node in enumerate(nodes)}
        W = np.zeros((len(nodes), len(nodes)))
        for (a, b), edge in self.edges.items():
            if a in index and b in index:
                W[index[a], index[b]] = edge.n_matches
                W[index[b], index[a]] = edge.n_matches
        return W


def select_pairs(
    priors: list[Pose], radius: float, max_neighbors: int = 10
) -> list[tuple[int, int]]:
    """Candidate image pairs whose prior camera centers lie within
    ``radius`` meters, keeping for each image only its ``max_neighbors``
    nearest partners (a pair survives when either endpoint keeps it)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    centers = np.array([p.center() for p in priors])
    if len(centers) < 2:
        return []
    tree = cKDTree(centers)
    raw = tree.query_pairs(radius, output_type="ndarray")
    if len(raw) == 0:
        return []
    d = np.linalg.norm(centers[raw[:, 0]] - centers[raw[:, 1]], axis=1)

    partners: dict[int, list[tuple[float, int, int]]] = {}
    for (a, b), dist in zip(raw, d):
        partners.setdefault(int(a), []).append((float(dist), int(b), int(a)))
        partners.setdefault(int(b), []).append((float(dist), int(a), int(b)))

    kept: set[tuple[int, int]] = set()
    for img, cand in partners.items():
        cand.sort()
        for dist, other, _ in cand[:max_neighbors]:
            kept.add(ViewGraph.key(img, other))
    return sorted(kept)


def verify_two_view(
    i: int,
    j: int,
    matches: PairMatches,
    intrinsics: CameraIntrinsics,
    *,
    threshold_rad: float = 1e-3,
    confidence: float = 0.999,
    max_iterations: int = 500,
    min_inliers: int = 15,
    min_inlier_ratio: float = 0.25,
    seed: int = 0,
) -> ViewGraphEdge | None:
    """RANSAC-verify one candidate pair into a view-graph edge, or reject
    it when too few matches survive."""
    n = len(matches.feat_i)
    if n < 5:
        return None
    rays_i = unproject(matches.pix_i, intrinsics)
    rays_j = unproject(matches.pix_j, intrinsics)
    geom = ransac_essential(
        rays_i,
        rays_j,
        threshold_rad=threshold_rad,
        confidence=confidence,
        max_iterations=max_iterations,
        min_inliers=min_inliers,
        min_inlier_ratio=min_inlier_ratio,
        seed=seed,
    )
    if geom is None:
        return None
    mask = geom.inlier_mask
    return ViewGraphEdge(
        i=i,
        j=j,
        n_matches=int(mask.sum()),
        feat_i=matches.feat_i[mask].copy(),
        feat_j=matches.feat_j[mask].copy(),
        pix_i=matches.pix_i[mask].copy(),
        pix_j=matches.pix_j[mask].copy(),
        rel_pose=geom.rel_pose,
    )


def _pair_seed(seed: int, i: int, j: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(i, j)).generate_state(1)[0])


def build_view_graph(
    matches: MatchSet,
    intrinsics: CameraIntrinsics,
    *,
    threshold_rad: float = 1e-3,
    confidence: float = 0.999,
    max_iterations: int = 500,
    min_inliers: int = 15,
    min_inlier_ratio: float = 0.25,
    seed: int = 0,
    threads: int = 1,
) -> ViewGraph:
    """Verify every candidate pair of a match set.  Each pair draws its
    RANSAC seed from (seed, i, j), so the result is independent of thread
    count and scheduling order."""
    graph = ViewGraph(matches.image_count)
    keys = sorted(matches.pairs)

    def job(key: tuple[int, int]) -> ViewGraphEdge | None:
        i, j = key
        return verify_two_view(
            i,
            j,
            matches.pairs[key],
            intrinsics,
            threshold_rad=threshold_rad,
            confidence=confidence,
            max_iterations=max_iterations,
            min_inliers=min_inliers,
            min_inlier_ratio=min_inlier_ratio,
            seed=_pair_seed(seed, i, j),
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, keys))
    else:
        results = [job(k) for k in keys]
    for edge in results:
        if edge is not None:
            graph.add_edge(edge)
    return graph


def _sweep_cut(nodes: list[int], W: np.ndarray) -> tuple[list[int], list[int]]:
    """Bisect one connected node set: order by the Fiedler embedding of the
    normalized Laplacian, then take the prefix cut minimizing the
    normalized-cut objective."""
    n = len(nodes)
    d = W.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(np.maximum(d, 1e-300))
    L = np.eye(n) - inv_sqrt[:, None] * W * inv_sqrt[None, :]
    L = 0.5 * (L + L.T)
    _, vecs = np.linalg.eigh(L)
    embedding = vecs[:, 1] * inv_sqrt
    order = np.argsort(embedding, kind="stable")

    d_ord = d[order]
    W_ord = W[np.ix_(order, order)]
    total = d.sum()
    vol_a = 0.0
    internal_a = 0.0
    best = (np.inf, 1)
    for k in range(n - 1):
        internal_a += 2.0 * W_ord[k, :k].sum()
        vol_a += d_ord[k]
        cut = vol_a - internal_a
        vol_b = total - vol_a
        if vol_a <= 0 or vol_b <= 0:
            continue
        obj = cut / vol_a + cut / vol_b
        if obj < best[0] - 1e-15:
            best = (obj, k + 1)
    split = best[1]
    side_a = [nodes[order[k]] for k in range(split)]
    side_b = [nodes[order[k]] for k in range(split, n)]
    return side_a, side_b


def _components(graph: ViewGraph) -> list[list[int]]:
    adj = graph.adjacency()
    seen: set[int] = set()
    comps: list[list[int]] = []
    for start in graph.connected_images():
        if start in seen:
            continue
        stack = [start]
        comp = []
        seen.add(start)
        while stack:
            node = stack.pop()
            comp.append(node)
            for nb in adj[node]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        comps.append(sorted(comp))
    comps.sort(key=lambda c: c[0])
    return comps


def _split_recursive(nodes: list[int], graph: ViewGraph, target: int) -> list[list[int]]:
    if len(nodes) <= target:
        return [sorted(nodes)]
    W = graph.weight_matrix(nodes)
    side_a, side_b = _sweep_cut(nodes, W)
    if not side_a or not side_b:
        return [sorted(nodes)]
    return _split_recursive(side_a, graph, target) + _split_recursive(side_b, graph, target)


def partition(
    graph: ViewGraph,
    *,
    target_cluster_size: int = 150,
    overlap_ratio: float = 0.2,
) -> list[Cluster]:
    """Split the view graph into clusters of at most ``target_cluster_size``
    images by recursive normalized cut (edge weight = inlier match count),
    then grow each cluster across its boundary by ``overlap_ratio`` times
    its core size.  Images without edges are left out; components already
    under the target pass through whole."""
    if target_cluster_size < 1:
        raise ValueError("target_cluster_size must be positive")
    if overlap_ratio < 0:
        raise ValueError("overlap_ratio must be non-negative")
    cores: list[list[int]] = []
    for comp in _components(graph):
        cores.extend(_split_recursive(comp, graph, target_cluster_size))
    cores.sort(key=lambda c: c[0])

    adj = graph.adjacency()
    clusters: list[Cluster] = []
    for cid, core in enumerate(cores):
        core_set = set(core)
        budget = int(np.floor(overlap_ratio * len(core) + 1e-9))
        extras: list[int] = []
        if budget > 0:
            attachment: dict[int, float] = {}
            for node in core:
                for nb in adj[node]:
                    if nb in core_set:
                        continue
                    edge = graph.edge(node, nb)
                    attachment[nb] = attachment.get(nb, 0.0) + edge.n_matches
            ranked = sorted(attachment.items(), key=lambda kv: (-kv[1], kv[0]))
            extras = [node for node, _ in ranked[:budget]]
        clusters.append(
            Cluster(cluster_id=cid, members=sorted(core + extras), overlap=sorted(extras))
        )
    return clusters


def write_viewgraph_summary(path, graph: ViewGraph) -> None:
    """Plain-text edge list: one `i j matches shared_points` row per edge."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# i j matches shared_points\n")
        for (i, j) in sorted(graph.edges):
            edge = graph.edges[(i, j)]
            fh.write(f"{i} {j} {edge.n_matches} {edge.n_points}\n")
