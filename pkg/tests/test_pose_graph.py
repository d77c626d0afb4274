"""Global pose graph: edge collection, assembly, and trajectory optimization."""

import numpy as np
import pytest

from conftest import random_pose
from navsfm.geometry import (
    Pose,
    compose,
    inverse,
    quat_conjugate,
    quat_from_rotvec,
    quat_multiply,
    retract,
    rotation_angle,
)
from navsfm.local_sfm import SubReconstruction, initialize_pair
from navsfm.pose_graph import (
    PgoOptions,
    PgoWeights,
    PoseGraph,
    RelativeEdge,
    build_pose_graph,
    collect_relative_edges,
    evaluate_cost,
    linearize,
    optimize,
    read_pose_graph_text,
    write_pose_graph_text,
)
from navsfm.simulator import NoiseModel, SurveyConfig, generate_survey, render_observations
from navsfm.viewgraph import build_view_graph
from oracles import (
    dense_pose_graph_solution,
    finite_difference_jacobian,
    jacobian_relative_error,
    rotation_angle_between,
)


@pytest.fixture(scope="module")
def pair_recon():
    """Noiseless two-image seed reconstruction plus its survey truth."""
    truth = generate_survey(
        SurveyConfig(track_count=1, track_length=16.0, cross_track=False, seed=7)
    )
    rendered = render_observations(truth, NoiseModel(), seed=0)
    graph = build_view_graph(rendered.matches, truth.intrinsics, seed=0, threads=4)
    edge = max(graph.edges.values(), key=lambda e: (e.n_matches, -e.i, -e.j))
    cam_priors = {i: truth.camera_poses[i].copy() for i in (edge.i, edge.j)}
    recon = initialize_pair(edge, cam_priors, truth.intrinsics)
    return truth, edge, recon


def _rotation_error(a: Pose, b: Pose) -> float:
    return rotation_angle(quat_multiply(a.q, quat_conjugate(b.q)))


def _line_poses(n: int, step: float = 1.0) -> list[Pose]:
    """Cameras marching along x with mild attitude drift, world-to-camera."""
    poses = []
    for i in range(n):
        q = quat_from_rotvec([0.02 * i, -0.015 * i, 0.01 * i])
        center = np.array([step * i, 0.1 * np.sin(0.7 * i), -0.05 * i])
        R = Pose(q, np.zeros(3)).rotation()
        poses.append(Pose(q, -R @ center))
    return poses


def _chain_edges(poses, weight: float = 1.0, shared: int = 50):
    return {
        (i, i + 1): RelativeEdge(
            i=i,
            j=i + 1,
            rel_pose=compose(poses[i + 1], inverse(poses[i])),
            shared=shared,
            weight=weight,
        )
        for i in range(len(poses) - 1)
    }


def _toy_recon(cluster_id, poses, pair_tracks, lid_base=0):
    """Hand-built reconstruction whose tracks tie given image pairs together.

    ``pair_tracks`` maps an image pair to the number of landmarks seen by
    exactly that pair.
    """
    tracks = {}
    lid = lid_base
    for (a, b), count in pair_tracks.items():
        for k in range(count):
            tracks[lid] = [(a, k, np.zeros(2)), (b, k, np.zeros(2))]
            lid += 1
    landmarks = {key: np.zeros(3) for key in tracks}
    return SubReconstruction(
        cluster_id=cluster_id, poses=poses, landmarks=landmarks, tracks=tracks
    )


def _mixed_graph(rng):
    """8 vertices, two edge components, vertex 4 isolated with both neighbors."""
    vertices = {i: random_pose(rng, trans_scale=2.0, max_angle=1.5) for i in range(8)}
    priors = {i: random_pose(rng, trans_scale=2.0, max_angle=1.5) for i in range(8)}
    edges = {}
    for a, b in [(0, 1), (1, 2), (2, 3), (0, 3), (5, 6), (6, 7), (5, 7)]:
        edges[(a, b)] = RelativeEdge(
            i=a,
            j=b,
            rel_pose=random_pose(rng, trans_scale=1.0, max_angle=1.0),
            shared=10,
            weight=float(rng.uniform(0.2, 1.0)),
        )
    return PoseGraph(vertices, priors, edges)


class TestGraphConstruction:
    def test_relative_edge_rejects_bad_endpoints(self):
        with pytest.raises(ValueError, match="i < j"):
            RelativeEdge(i=2, j=1, rel_pose=Pose.identity(), shared=5)
        with pytest.raises(ValueError, match="non-negative"):
            RelativeEdge(i=0, j=1, rel_pose=Pose.identity(), shared=-1)

    def test_weights_must_be_non_negative(self):
        with pytest.raises(ValueError, match="rho_sm"):
            PgoWeights(rho_sm=-0.5)
        w = PgoWeights()
        assert (w.rho_rel, w.rho_abs, w.rho_sm) == (1.0, 0.001, 2.0)

    def test_graph_validates_edges_and_priors(self):
        poses = {i: Pose.identity() for i in range(3)}
        edge = RelativeEdge(i=0, j=1, rel_pose=Pose.identity(), shared=5)
        with pytest.raises(ValueError, match="without a prior"):
            PoseGraph(poses, {0: Pose.identity()}, {})
        with pytest.raises(ValueError, match="missing vertex"):
            PoseGraph(
                {0: Pose.identity()},
                {0: Pose.identity()},
                {(0, 1): edge},
            )
        with pytest.raises(ValueError, match="does not match"):
            PoseGraph(poses, dict(poses), {(1, 2): edge})

    def test_isolated_set_is_recomputed(self):
        poses = {i: Pose.identity() for i in range(4)}
        edge = RelativeEdge(i=0, j=1, rel_pose=Pose.identity(), shared=5)
        graph = PoseGraph(poses, dict(poses), {(0, 1): edge})
        assert graph.isolated == [2, 3]
        graph.edges.pop((0, 1))
        assert graph.isolated == [0, 1, 2, 3]

    def test_smooth_triples_skip_sequence_boundaries(self):
        poses = {i: Pose.identity() for i in range(3)}
        graph = PoseGraph(poses, dict(poses), {})
        assert graph.isolated == [0, 1, 2]
        assert graph.smooth_triples() == [(0, 1, 2)]

    def test_build_initializes_from_first_reconstruction_then_priors(self, rng):
        pose_a1 = random_pose(rng)
        pose_b1 = random_pose(rng)
        recon_a = SubReconstruction(cluster_id=0, poses={0: random_pose(rng), 1: pose_a1})
        recon_b = SubReconstruction(cluster_id=1, poses={1: pose_b1, 2: random_pose(rng)})
        priors = {i: random_pose(rng) for i in range(4)}
        graph = build_pose_graph(4, [recon_a, recon_b], priors, {})
        assert sorted(graph.vertices) == [0, 1, 2, 3]
        assert np.allclose(graph.vertices[1].q, pose_a1.q)
        assert np.allclose(graph.vertices[1].t, pose_a1.t)
        assert np.allclose(graph.vertices[3].t, priors[3].t)
        assert sorted(graph.priors) == [0, 1, 2, 3]


class TestCollectRelativeEdges:
    def test_pairs_sharing_nothing_make_no_edge(self):
        poses = {i: Pose.identity() for i in range(3)}
        recon = _toy_recon(0, poses, {(0, 1): 6})
        edges = collect_relative_edges([recon])
        assert set(edges) == {(0, 1)}

    def test_min_shared_boundary(self):
        poses = {i: Pose.identity() for i in range(2)}
        assert collect_relative_edges([_toy_recon(0, poses, {(0, 1): 4})]) == {}
        edges = collect_relative_edges([_toy_recon(0, poses, {(0, 1): 5})])
        assert edges[(0, 1)].shared == 5

    def test_noiseless_measurement_matches_truth(self, pair_recon):
        truth, edge, recon = pair_recon
        edges = collect_relative_edges([recon])
        assert set(edges) == {(edge.i, edge.j)}
        measured = edges[(edge.i, edge.j)].rel_pose
        expected = compose(
            truth.camera_poses[edge.j], inverse(truth.camera_poses[edge.i])
        )
        assert _rotation_error(measured, expected) < 1e-6
        assert np.linalg.norm(measured.t - expected.t) < 1e-6

    def test_duplicate_pair_keeps_larger_shared_count(self, rng):
        pose_b6 = random_pose(rng)
        pose_b9 = random_pose(rng)
        recon6 = _toy_recon(0, {0: Pose.identity(), 1: pose_b6}, {(0, 1): 6})
        recon9 = _toy_recon(1, {0: Pose.identity(), 1: pose_b9}, {(0, 1): 9}, lid_base=100)
        for order in ([recon6, recon9], [recon9, recon6]):
            edges = collect_relative_edges(order)
            assert edges[(0, 1)].shared == 9
            expected = compose(pose_b9, inverse(Pose.identity()))
            assert _rotation_error(edges[(0, 1)].rel_pose, expected) < 1e-12

    def test_weight_cap_and_flag(self):
        poses = {0: Pose.identity(), 1: Pose.identity()}
        capped = collect_relative_edges([_toy_recon(0, poses, {(0, 1): 250})])
        assert capped[(0, 1)].weight == 1.0
        partial = collect_relative_edges([_toy_recon(0, poses, {(0, 1): 50})])
        assert partial[(0, 1)].weight == pytest.approx(0.25)
        flat = collect_relative_edges(
            [_toy_recon(0, poses, {(0, 1): 50})], weighted=False
        )
        assert flat[(0, 1)].weight == 1.0


class TestLinearize:
    def test_jacobians_match_finite_differences(self, rng):
        for _ in range(4):
            graph = _mixed_graph(rng)
            ids = sorted(graph.vertices)
            index = {img: k for k, img in enumerate(ids)}
            residual, blocks = linearize(graph)
            arities = {len(b) for b in blocks}
            assert arities == {1, 2, 3}  # all three constraint kinds present

            J_analytic = np.zeros((residual.size, 6 * len(ids)))
            for t, term in enumerate(blocks):
                for img, block in term.items():
                    J_analytic[6 * t : 6 * t + 6, 6 * index[img] : 6 * index[img] + 6] = block

            def stacked(x):
                poses = {
                    img: retract(graph.vertices[img], x[6 * index[img] : 6 * index[img] + 6])
                    for img in ids
                }
                return linearize(graph, poses)[0]

            J_fd = finite_difference_jacobian(stacked, np.zeros(6 * len(ids)))
            assert jacobian_relative_error(J_analytic, J_fd) < 1e-5

    def test_smooth_terms_touch_only_isolated_neighborhood(self, rng):
        graph = _mixed_graph(rng)
        residual, blocks = linearize(graph)
        smooth = [b for b in blocks if len(b) == 3]
        assert len(smooth) == 1
        assert set(smooth[0]) == {3, 4, 5}
        for b in (b for b in blocks if len(b) == 2):
            assert 4 not in b

    def test_perturbing_isolated_vertex_changes_only_its_terms(self, rng):
        graph = _mixed_graph(rng)
        residual, blocks = linearize(graph)
        poses = {img: p.copy() for img, p in graph.vertices.items()}
        poses[4] = retract(poses[4], np.array([0.01, -0.02, 0.015, 0.1, -0.05, 0.2]))
        moved, _ = linearize(graph, poses)
        # pose copies renormalize the quaternion, so ignore bit-level noise
        changed = {
            t
            for t in range(len(blocks))
            if np.max(np.abs(residual[6 * t : 6 * t + 6] - moved[6 * t : 6 * t + 6])) > 1e-9
        }
        assert changed == {t for t, b in enumerate(blocks) if 4 in b}

    def test_removing_isolated_vertex_leaves_other_residuals_unchanged(self, rng):
        graph = _mixed_graph(rng)
        residual, blocks = linearize(graph)
        without = PoseGraph(
            {i: p for i, p in graph.vertices.items() if i != 4},
            {i: p for i, p in graph.priors.items() if i != 4},
            graph.edges,
            graph.weights,
        )
        assert without.isolated == []
        reduced, small_blocks = linearize(without)
        keep = [t for t, b in enumerate(blocks) if 4 not in b]
        expected = np.concatenate([residual[6 * t : 6 * t + 6] for t in keep])
        assert np.allclose(reduced, expected, atol=1e-12)
        assert len(small_blocks) == len(keep)


class TestOptimize:
    def test_noiseless_graph_is_fixed_point(self):
        poses = _line_poses(5)
        vertices = {i: p.copy() for i, p in enumerate(poses)}
        priors = {i: p.copy() for i, p in enumerate(poses)}
        graph = PoseGraph(vertices, priors, _chain_edges(poses))
        result = optimize(graph)
        assert result.converged
        assert result.iterations <= 2
        assert result.message == "cost at tolerance floor"
        assert result.final_cost < 1e-12
        for i, pose in enumerate(poses):
            assert _rotation_error(result.poses[i], pose) < 1e-9
            assert np.linalg.norm(result.poses[i].t - pose.t) < 1e-9

    def test_chain_matches_dense_least_squares_oracle(self, rng):
        truth = _line_poses(10)
        edges = _chain_edges(truth)
        priors = {
            i: retract(
                p,
                np.concatenate(
                    [rng.normal(scale=0.01, size=3), rng.normal(scale=0.05, size=3)]
                ),
            )
            for i, p in enumerate(truth)
        }
        vertices = {i: priors[i].copy() for i in range(10)}
        graph = PoseGraph(vertices, priors, edges)
        result = optimize(graph)
        assert result.converged
        assert result.final_cost <= result.initial_cost

        w = graph.weights
        oracle = dense_pose_graph_solution(
            initial=[(priors[i].rotation(), priors[i].t.copy()) for i in range(10)],
            priors=[(priors[i].rotation(), priors[i].t.copy()) for i in range(10)],
            rel_edges=[
                (i, j, e.rel_pose.rotation(), e.rel_pose.t.copy(), e.weight)
                for (i, j), e in sorted(edges.items())
            ],
            smooth_ids=[],
            rho_rel=w.rho_rel,
            rho_abs=w.rho_abs,
            rho_sm=w.rho_sm,
        )
        for i, (R_ref, t_ref) in enumerate(oracle):
            assert rotation_angle_between(result.poses[i].rotation(), R_ref) < 1e-4
            assert np.linalg.norm(result.poses[i].t - t_ref) < 1e-4

    def test_isolated_vertex_lands_on_constant_velocity_interpolation(self):
        identity = np.array([1.0, 0.0, 0.0, 0.0])
        t0 = np.zeros(3)
        t2 = np.array([-2.0, 0.0, 0.0])
        vertices = {
            0: Pose(identity, t0),
            1: Pose(identity, np.array([-0.4, 0.7, -0.3])),
            2: Pose(identity, t2),
        }
        priors = {
            0: Pose(identity, t0),
            1: Pose(identity, np.array([-0.4, 0.7, -0.3])),
            2: Pose(identity, t2),
        }
        edge = RelativeEdge(
            i=0, j=2, rel_pose=compose(vertices[2], inverse(vertices[0])), shared=50
        )
        graph = PoseGraph(vertices, priors, {(0, 2): edge})
        assert graph.isolated == [1]
        result = optimize(graph)
        assert result.converged
        midpoint = 0.5 * (result.poses[0].t + result.poses[2].t)
        assert np.linalg.norm(result.poses[1].t - midpoint) < 1e-3
        assert rotation_angle(result.poses[1].q) < 1e-3

    def test_gauge_fixed_initializations_agree(self, rng):
        truth = _line_poses(6)
        edges = _chain_edges(truth)
        priors = {i: p.copy() for i, p in enumerate(truth)}
        exact = PoseGraph({i: p.copy() for i, p in enumerate(truth)}, priors, edges)
        perturbed_vertices = {
            i: retract(
                p,
                np.concatenate(
                    [rng.normal(scale=0.03, size=3), rng.normal(scale=0.15, size=3)]
                ),
            )
            for i, p in enumerate(truth)
        }
        shaken = PoseGraph(perturbed_vertices, priors, edges)
        res_a = optimize(exact)
        res_b = optimize(shaken)
        for i in range(6):
            assert _rotation_error(res_a.poses[i], res_b.poses[i]) < 1e-6
            assert np.linalg.norm(res_a.poses[i].t - res_b.poses[i].t) < 1e-6

    def test_loop_closures_pull_down_accumulated_drift(self, rng):
        truth = generate_survey(
            SurveyConfig(track_count=2, track_length=16.0, cross_track=True, seed=21)
        )
        cams = truth.camera_poses
        n = truth.image_count
        drift = Pose(quat_from_rotvec([0.0, 0.006, 0.003]), np.array([0.02, -0.01, 0.005]))
        edges = {}
        for i in range(n - 1):
            rel_true = compose(cams[i + 1], inverse(cams[i]))
            edges[(i, i + 1)] = RelativeEdge(
                i=i, j=i + 1, rel_pose=compose(drift, rel_true), shared=60
            )
        centers = np.array([c.center() for c in cams])
        spacing = np.median(np.linalg.norm(np.diff(centers, axis=0), axis=1))
        closures = 0
        for i in range(n):
            for j in range(i + 4, n):
                if np.linalg.norm(centers[j] - centers[i]) < 1.5 * spacing:
                    edges[(i, j)] = RelativeEdge(
                        i=i,
                        j=j,
                        rel_pose=compose(cams[j], inverse(cams[i])),
                        shared=40,
                    )
                    closures += 1
        assert closures >= 4  # the crossing strip must actually close loops

        integrated = {0: cams[0].copy()}
        for i in range(n - 1):
            integrated[i + 1] = compose(edges[(i, i + 1)].rel_pose, integrated[i])
        priors = {
            i: retract(
                cams[i],
                np.concatenate(
                    [rng.normal(scale=0.01, size=3), rng.normal(scale=0.15, size=3)]
                ),
            )
            for i in range(n)
        }

        def ate(poses):
            err = [poses[i].center() - cams[i].center() for i in range(n)]
            return float(np.sqrt(np.mean(np.sum(np.square(err), axis=1))))

        graph = PoseGraph(integrated, priors, edges)
        before = ate(integrated)
        result = optimize(graph)
        after = ate(result.poses)
        assert after < before
        assert after < 0.5 * before

    def test_report_splits_cost_by_term(self, rng):
        truth = _line_poses(8)
        priors = {
            i: retract(
                p,
                np.concatenate(
                    [rng.normal(scale=0.01, size=3), rng.normal(scale=0.05, size=3)]
                ),
            )
            for i, p in enumerate(truth)
        }
        vertices = {i: priors[i].copy() for i in range(8)}
        graph = PoseGraph(vertices, priors, _chain_edges(truth))
        snapshot = {i: (p.q.copy(), p.t.copy()) for i, p in graph.vertices.items()}
        result = optimize(graph)
        assert result.initial_cost == pytest.approx(
            sum(result.initial_cost_by_term.values()), rel=1e-12
        )
        assert result.final_cost == pytest.approx(
            sum(result.final_cost_by_term.values()), rel=1e-12
        )
        assert result.final_cost <= result.initial_cost
        assert result.trace[0] == result.initial_cost
        assert np.all(np.diff(result.trace) <= 0.0)
        assert result.final_cost == pytest.approx(result.trace[-1], rel=1e-12, abs=1e-18)
        total, by_term = evaluate_cost(graph)
        assert total == pytest.approx(result.initial_cost, rel=1e-12)
        for i, (q, t) in snapshot.items():
            assert np.array_equal(graph.vertices[i].q, q)
            assert np.array_equal(graph.vertices[i].t, t)


class TestTextFormat:
    def test_round_trip_preserves_graph(self, rng, tmp_path):
        graph = _mixed_graph(rng)
        path = tmp_path / "graph.txt"
        write_pose_graph_text(path, graph)
        loaded = read_pose_graph_text(path, weights=graph.weights)
        assert sorted(loaded.vertices) == sorted(graph.vertices)
        assert sorted(loaded.edges) == sorted(graph.edges)
        # translations survive exactly; quaternions are renormalized on load
        for i, pose in graph.vertices.items():
            assert np.allclose(loaded.vertices[i].q, pose.q, rtol=0, atol=1e-15)
            assert np.array_equal(loaded.vertices[i].t, pose.t)
            assert np.allclose(loaded.priors[i].q, graph.priors[i].q, rtol=0, atol=1e-15)
        for key, edge in graph.edges.items():
            other = loaded.edges[key]
            assert other.shared == edge.shared
            assert other.weight == edge.weight
            assert np.allclose(other.rel_pose.q, edge.rel_pose.q, rtol=0, atol=1e-15)
            assert np.array_equal(other.rel_pose.t, edge.rel_pose.t)

    def test_unknown_line_tag_is_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("VERTEX 0 1 0 0 0 0 0 0\nNOISE 1 2 3\n")
        with pytest.raises(ValueError, match="NOISE"):
            read_pose_graph_text(path)
