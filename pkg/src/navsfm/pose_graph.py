"""Global pose-graph optimization over all survey cameras.

The graph carries three residual families: relative constraints between
image pairs that share triangulated landmarks inside some sub-
reconstruction, a weak absolute pull of every camera toward its prior, and
a constant-velocity smoothness penalty for cameras that have no relative
constraints at all.  Optimization is damped Gauss-Newton on the 6-dof pose
manifold with a sparse normal-equation solve.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, diags
from scipy.sparse.linalg import splu

from .geometry import (
    Pose,
    compose,
    compose_jacobians,
    inverse,
    inverse_jacobian,
    pose_residual,
    pose_residual_jacobians,
    retract,
)

__all__ = [
    "PgoOptions",
    "PgoResult",
    "PgoWeights",
    "PoseGraph",
    "RelativeEdge",
    "build_pose_graph",
    "collect_relative_edges",
    "evaluate_cost",
    "linearize",
    "optimize",
    "read_pose_graph_text",
    "write_pose_graph_text",
]


@dataclass(frozen=True)
class PgoWeights:
    """Scalar multipliers balancing the three constraint families."""

    rho_rel: float = 1.0
    rho_abs: float = 0.001
    rho_sm: float = 2.0

    def __post_init__(self) -> None:
        for name in ("rho_rel", "rho_abs", "rho_sm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class RelativeEdge:
    """Measured metric relative pose between images ``i < j``.

    ``rel_pose`` maps camera-i coordinates into camera-j coordinates;
    ``shared`` counts the landmarks the measurement rests on and ``weight``
    is the per-edge confidence factor inside the relative term.
    """

    i: int
    j: int
    rel_pose: Pose
    shared: int
    weight: float = 1.0

    def __post_init__(self) -> None:
        if self.i >= self.j:
            raise ValueError(f"edge endpoints must satisfy i < j, got ({self.i}, {self.j})")
        if self.shared < 0 or self.weight < 0:
            raise ValueError("shared count and weight must be non-negative")


class PoseGraph:
    """Vertices for every survey image plus relative-pose constraints.

    Every vertex carries the camera-frame prior used by the absolute term.
    The isolated set (vertices with no relative edges) is recomputed on
    demand so it can never go stale.
    """

    def __init__(
        self,
        vertices: dict[int, Pose],
        priors: dict[int, Pose],
        edges: dict[tuple[int, int], RelativeEdge],
        weights: PgoWeights | None = None,
    ):
        missing = sorted(set(vertices) - set(priors))
        if missing:
            raise ValueError(f"vertices without a prior: {missing[:5]}")
        for (a, b), edge in edges.items():
            if (a, b) != (edge.i, edge.j):
                raise ValueError(f"edge key ({a}, {b}) does not match its endpoints")
            if a not in vertices or b not in vertices:
                raise ValueError(f"edge ({a}, {b}) references a missing vertex")
        self.vertices = {i: p.copy() for i, p in vertices.items()}
        self.priors = {i: p.copy() for i, p in priors.items()}
        self.edges = dict(edges)
        self.weights = weights or PgoWeights()

    @property
    def isolated(self) -> list[int]:
        touched = {i for pair in self.edges for i in pair}
        return sorted(set(self.vertices) - touched)

    def smooth_triples(self) -> list[tuple[int, int, int]]:
        """(prev, isolated, next) in capture order, skipping vertices that
        lack either neighbor."""
        out = []
        for i in self.isolated:
            if i - 1 in self.vertices and i + 1 in self.vertices:
                out.append((i - 1, i, i + 1))
        return out


def collect_relative_edges(
    subrecons,
    min_shared: int = 5,
    weight_cap: int = 200,
    weighted: bool = True,
) -> dict[tuple[int, int], RelativeEdge]:
    """Relative-pose measurements from every co-observing pair.

    Within each sub-reconstruction, every image pair sharing at least
    ``min_shared`` landmarks yields a measurement computed from the two
    optimized absolute poses — this includes pairs that were never matched
    directly.  A pair present in several sub-reconstructions keeps the
    measurement with the larger shared count.
    """
    edges: dict[tuple[int, int], RelativeEdge] = {}
    for recon in subrecons:
        shared: dict[tuple[int, int], int] = {}
        for obs in recon.tracks.values():
            imgs = sorted({img for img, _, _ in obs})
            for x in range(len(imgs)):
                for y in range(x + 1, len(imgs)):
                    key = (imgs[x], imgs[y])
                    shared[key] = shared.get(key, 0) + 1
        for (a, b), count in shared.items():
            if count < min_shared:
                continue
            existing = edges.get((a, b))
            if existing is not None and existing.shared >= count:
                continue
            rel = compose(recon.poses[b], inverse(recon.poses[a]))
            weight = min(count, weight_cap) / weight_cap if weighted else 1.0
            edges[(a, b)] = RelativeEdge(
                i=a, j=b, rel_pose=rel, shared=count, weight=weight
            )
    return edges


def build_pose_graph(
    image_count: int,
    subrecons,
    cam_priors: dict[int, Pose],
    edges: dict[tuple[int, int], RelativeEdge],
    weights: PgoWeights | None = None,
) -> PoseGraph:
    """Assemble the graph: one vertex per survey image, initialized from
    the first sub-reconstruction that registered it, else from its prior."""
    vertices: dict[int, Pose] = {}
    for recon in subrecons:
        for img, pose in recon.poses.items():
            if img not in vertices:
                vertices[img] = pose.copy()
    for img in range(image_count):
        if img not in vertices:
            vertices[img] = cam_priors[img].copy()
    priors = {img: cam_priors[img].copy() for img in range(image_count)}
    return PoseGraph(vertices, priors, edges, weights)


@dataclass(frozen=True)
class PgoOptions:
    max_iterations: int = 100
    max_inner: int = 10
    lambda_init: float = 1e-6
    lambda_min: float = 1e-12
    lambda_max: float = 1e10
    cost_tol: float = 1e-14
    step_tol: float = 1e-12


@dataclass
class PgoResult:
    poses: dict[int, Pose]
    initial_cost: float
    final_cost: float
    initial_cost_by_term: dict[str, float]
    final_cost_by_term: dict[str, float]
    iterations: int
    converged: bool
    message: str
    trace: list[float] = field(default_factory=list)


def _term_specs(graph: PoseGraph):
    """Static structure of every residual term: kind, scale, vertex ids."""
    w = graph.weights
    specs = []
    if w.rho_rel > 0:
        for key in sorted(graph.edges):
            edge = graph.edges[key]
            scale = np.sqrt(w.rho_rel * edge.weight)
            if scale > 0:
                specs.append(("relative", scale, key, edge.rel_pose))
    if w.rho_abs > 0:
        scale = np.sqrt(w.rho_abs)
        for img in sorted(graph.vertices):
            specs.append(("absolute", scale, (img,), graph.priors[img]))
    if w.rho_sm > 0:
        scale = np.sqrt(w.rho_sm)
        for triple in graph.smooth_triples():
            specs.append(("smooth", scale, triple, None))
    return specs


def _term_residual(kind, scale, ids, target, poses):
    if kind == "relative":
        a, b = ids
        rel_est = compose(poses[b], inverse(poses[a]))
        return scale * pose_residual(rel_est, target)
    if kind == "absolute":
        return scale * pose_residual(poses[ids[0]], target)
    p, i, n = ids
    rel_prev = compose(poses[i], inverse(poses[p]))
    rel_next = compose(poses[n], inverse(poses[i]))
    return scale * pose_residual(rel_prev, rel_next)


def _term_jacobians(kind, scale, ids, target, poses):
    """Residual and {vertex id: 6x6 Jacobian} for one term."""
    if kind == "relative":
        a, b = ids
        inv_a = inverse(poses[a])
        rel_est = compose(poses[b], inv_a)
        r, J_rel, _ = pose_residual_jacobians(rel_est, target)
        J_b, J_inva = compose_jacobians(poses[b], inv_a)
        return scale * r, {
            a: scale * (J_rel @ J_inva @ inverse_jacobian(poses[a])),
            b: scale * (J_rel @ J_b),
        }
    if kind == "absolute":
        img = ids[0]
        r, J_v, _ = pose_residual_jacobians(poses[img], target)
        return scale * r, {img: scale * J_v}
    p, i, n = ids
    inv_p = inverse(poses[p])
    inv_i = inverse(poses[i])
    rel_prev = compose(poses[i], inv_p)
    rel_next = compose(poses[n], inv_i)
    r, J_prev, J_next = pose_residual_jacobians(rel_prev, rel_next)
    Ja_i, Ja_invp = compose_jacobians(poses[i], inv_p)
    Jb_n, Jb_invi = compose_jacobians(poses[n], inv_i)
    return scale * r, {
        p: scale * (J_prev @ Ja_invp @ inverse_jacobian(poses[p])),
        i: scale * (J_prev @ Ja_i + J_next @ Jb_invi @ inverse_jacobian(poses[i])),
        n: scale * (J_next @ Jb_n),
    }


def evaluate_cost(graph: PoseGraph, poses=None) -> tuple[float, dict[str, float]]:
    """Total cost and its per-term breakdown at the given (or stored) poses."""
    poses = poses if poses is not None else graph.vertices
    by_term = {"relative": 0.0, "absolute": 0.0, "smooth": 0.0}
    for kind, scale, ids, target in _term_specs(graph):
        r = _term_residual(kind, scale, ids, target, poses)
        by_term[kind] += float(r @ r)
    return sum(by_term.values()), by_term


def linearize(graph: PoseGraph, poses=None):
    """Stacked scaled residual plus one ``{image id: 6x6 block}`` per term.

    Term t occupies residual rows ``6t:6t+6``; its Jacobian is nonzero only
    in the returned blocks.  Evaluated at ``poses`` (default: the stored
    vertices).
    """
    poses = poses if poses is not None else graph.vertices
    rows = []
    blocks = []
    for spec in _term_specs(graph):
        r, jac = _term_jacobians(*spec, poses)
        rows.append(r)
        blocks.append(jac)
    residual = np.concatenate(rows) if rows else np.zeros(0)
    return residual, blocks


def _assemble_normal(residual, blocks, index):
    """Gauss-Newton normal equations H = J^T J (sparse), g = J^T r."""
    n = len(index)
    g = np.zeros(6 * n)
    data, rows_idx, cols_idx = [], [], []
    base = np.arange(6)
    for t, term_blocks in enumerate(blocks):
        r = residual[6 * t : 6 * t + 6]
        items = [(index[img], J) for img, J in sorted(term_blocks.items())]
        for va, Ba in items:
            g[6 * va : 6 * va + 6] += Ba.T @ r
            for vb, Bb in items:
                H_block = Ba.T @ Bb
                rows_idx.append(np.repeat(6 * va + base, 6))
                cols_idx.append(np.tile(6 * vb + base, 6))
                data.append(H_block.ravel())
    if data:
        H = coo_matrix(
            (np.concatenate(data), (np.concatenate(rows_idx), np.concatenate(cols_idx))),
            shape=(6 * n, 6 * n),
        ).tocsc()
    else:
        H = coo_matrix((6 * n, 6 * n)).tocsc()
    return H, g


def _solve_damped(H, g, lam):
    damped = (H + diags(lam * H.diagonal() + 1e-12)).tocsc()
    try:
        solver = splu(damped)
        return solver.solve(-g)
    except RuntimeError:
        return None


def optimize(graph: PoseGraph, options: PgoOptions | None = None) -> PgoResult:
    """Damped least squares over all vertices.

    Accepted steps never increase the total cost; the result reports the
    initial and final cost split by constraint family along with the
    accepted-cost trace.
    """
    options = options or PgoOptions()
    ids = sorted(graph.vertices)
    index = {img: k for k, img in enumerate(ids)}
    poses = {img: graph.vertices[img].copy() for img in ids}

    cost, initial_by_term = evaluate_cost(graph, poses)
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
        residual, blocks = linearize(graph, poses)
        H, g = _assemble_normal(residual, blocks, index)
        accepted = False
        closest = np.inf
        for _ in range(options.max_inner):
            delta = _solve_damped(H, g, lam)
            if delta is None or not np.all(np.isfinite(delta)):
                lam = min(lam * 10.0, options.lambda_max)
                continue
            cand = {
                img: retract(poses[img], delta[6 * index[img] : 6 * index[img] + 6])
                for img in ids
            }
            cand_cost, _ = evaluate_cost(graph, cand)
            if np.isfinite(cand_cost):
                closest = min(closest, cand_cost)
            if np.isfinite(cand_cost) and cand_cost <= cost:
                step_norm = float(np.linalg.norm(delta))
                rel_drop = (cost - cand_cost) / max(cost, 1e-300)
                poses = cand
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

    final_cost, final_by_term = evaluate_cost(graph, poses)
    return PgoResult(
        poses=poses,
        initial_cost=initial_cost,
        final_cost=final_cost,
        initial_cost_by_term=initial_by_term,
        final_cost_by_term=final_by_term,
        iterations=iterations,
        converged=converged,
        message=message,
        trace=trace,
    )


def write_pose_graph_text(path, graph: PoseGraph) -> None:
    """Plain-text dump: VERTEX/PRIOR/EDGE lines with quaternion + translation."""
    with open(path, "w") as fh:
        fh.write("# pose graph: VERTEX id qw qx qy qz tx ty tz\n")
        fh.write("#             PRIOR  id qw qx qy qz tx ty tz\n")
        fh.write("#             EDGE   i j qw qx qy qz tx ty tz shared weight\n")
        for img in sorted(graph.vertices):
            p = graph.vertices[img]
            fh.write(
                f"VERTEX {img} " + " ".join(f"{v:.17g}" for v in np.concatenate([p.q, p.t])) + "\n"
            )
        for img in sorted(graph.priors):
            p = graph.priors[img]
            fh.write(
                f"PRIOR {img} " + " ".join(f"{v:.17g}" for v in np.concatenate([p.q, p.t])) + "\n"
            )
        for key in sorted(graph.edges):
            e = graph.edges[key]
            vals = " ".join(f"{v:.17g}" for v in np.concatenate([e.rel_pose.q, e.rel_pose.t]))
            fh.write(f"EDGE {e.i} {e.j} {vals} {e.shared} {e.weight:.17g}\n")


def read_pose_graph_text(path, weights: PgoWeights | None = None) -> PoseGraph:
    vertices: dict[int, Pose] = {}
    priors: dict[int, Pose] = {}
    edges: dict[tuple[int, int], RelativeEdge] = {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag in ("VERTEX", "PRIOR"):
                img = int(parts[1])
                nums = np.array([float(v) for v in parts[2:9]])
                pose = Pose(nums[:4], nums[4:])
                (vertices if tag == "VERTEX" else priors)[img] = pose
            elif tag == "EDGE":
                i, j = int(parts[1]), int(parts[2])
                nums = np.array([float(v) for v in parts[3:10]])
                edges[(i, j)] = RelativeEdge(
                    i=i,
                    j=j,
                    rel_pose=Pose(nums[:4], nums[4:]),
                    shared=int(parts[10]),
                    weight=float(parts[11]),
                )
            else:
                raise ValueError(f"unrecognized line tag: {tag!r}")
    return PoseGraph(vertices, priors, edges, weights)
