"""Per-cluster incremental reconstruction: seeding, registration, growth."""

import numpy as np
import pytest

from navsfm.camera import project
from navsfm.geometry import Pose, compose, inverse, quat_conjugate, quat_multiply, rotation_angle
from navsfm.local_sfm import (
    ReconstructionConfig,
    SubReconstruction,
    initialize_pair,
    reconstruct_cluster,
    register_image,
)
from navsfm.simulator import (
    NoiseModel,
    SurveyConfig,
    WeakStrip,
    generate_survey,
    render_observations,
)
from navsfm.viewgraph import Cluster, build_view_graph, partition


@pytest.fixture(scope="module")
def survey():
    """18-image two-track noiseless survey with its verified view graph."""
    truth = generate_survey(
        SurveyConfig(track_count=2, track_length=16.0, cross_track=False, seed=7)
    )
    rendered = render_observations(truth, NoiseModel(), seed=0)
    graph = build_view_graph(rendered.matches, truth.intrinsics, seed=0, threads=4)
    priors = {i: p for i, p in enumerate(truth.vehicle_poses())}
    return truth, rendered, graph, priors


@pytest.fixture(scope="module")
def seed_recon(survey):
    """Strongest edge of the survey plus the seed built from it at truth priors."""
    truth, _, graph, _ = survey
    edge = max(graph.edges.values(), key=lambda e: (e.n_matches, -e.i, -e.j))
    cam_priors = {i: truth.camera_poses[i].copy() for i in (edge.i, edge.j)}
    recon = initialize_pair(edge, cam_priors, truth.intrinsics)
    return edge, recon


@pytest.fixture(scope="module")
def cluster30():
    """30-image noiseless survey reconstructed as a single cluster."""
    truth = generate_survey(
        SurveyConfig(track_count=2, track_length=28.0, cross_track=False, seed=33)
    )
    assert truth.image_count == 30
    rendered = render_observations(truth, NoiseModel(), seed=0)
    graph = build_view_graph(rendered.matches, truth.intrinsics, seed=0, threads=4)
    clusters = partition(graph)
    assert len(clusters) == 1
    priors = {i: p for i, p in enumerate(truth.vehicle_poses())}
    recon = reconstruct_cluster(clusters[0], graph, priors, truth.intrinsics, truth.rig)
    return truth, graph, recon


def _rotation_error(a: Pose, b: Pose) -> float:
    return rotation_angle(quat_multiply(a.q, quat_conjugate(b.q)))


def _copy(recon: SubReconstruction) -> SubReconstruction:
    return SubReconstruction(
        cluster_id=recon.cluster_id,
        poses={k: p.copy() for k, p in recon.poses.items()},
        landmarks={k: v.copy() for k, v in recon.landmarks.items()},
        tracks={k: list(t) for k, t in recon.tracks.items()},
    )


def _correspondences_to(truth, rendered, recon, image_id):
    """2D-3D matches from existing tracks into one image, found through the
    simulator's feature-to-landmark table (zero dropout, so feature index
    equals the row in the image's observation list)."""
    ids_k, pix_k = truth.observations[image_id]
    corr = []
    for lid, obs in sorted(recon.tracks.items()):
        img0, feat0, _ = obs[0]
        true_lm = rendered.feature_landmarks[img0][feat0]
        pos = int(np.searchsorted(ids_k, true_lm))
        if pos < len(ids_k) and ids_k[pos] == true_lm:
            corr.append((lid, pos, pix_k[pos].copy()))
    return corr


class TestInitializePair:
    def test_noiseless_seed_matches_truth(self, survey, seed_recon):
        truth, _, _, _ = survey
        edge, recon = seed_recon
        # first camera sits exactly on its prior; second is placed by the
        # metric-scaled relative pose and must land on the true camera
        assert np.allclose(
            recon.poses[edge.i].center(), truth.camera_poses[edge.i].center(), atol=1e-12
        )
        err = np.linalg.norm(
            recon.poses[edge.j].center() - truth.camera_poses[edge.j].center()
        )
        assert err < 1e-6
        assert _rotation_error(recon.poses[edge.j], truth.camera_poses[edge.j]) < 1e-6

    def test_seed_landmarks_match_truth(self, survey, seed_recon):
        truth, rendered, _, _ = survey
        edge, recon = seed_recon
        assert len(recon.landmarks) >= 0.9 * edge.n_matches
        for lid, obs in recon.tracks.items():
            assert len(obs) == 2
            img0, feat0, _ = obs[0]
            true_lm = rendered.feature_landmarks[img0][feat0]
            assert np.linalg.norm(recon.landmarks[lid] - truth.landmarks[true_lm]) < 1e-6

    def test_doubling_prior_baseline_doubles_reconstruction(self, survey):
        truth, _, graph, _ = survey
        edge = max(graph.edges.values(), key=lambda e: (e.n_matches, -e.i, -e.j))
        p_i = truth.camera_poses[edge.i]
        p_j = truth.camera_poses[edge.j]
        c_i, c_j = p_i.center(), p_j.center()

        def with_center(pose, center):
            return Pose(pose.q.copy(), -pose.rotation() @ center)

        near = {edge.i: p_i.copy(), edge.j: p_j.copy()}
        far = {edge.i: p_i.copy(), edge.j: with_center(p_j, c_i + 2.0 * (c_j - c_i))}

        def out_baseline(r):
            return float(
                np.linalg.norm(r.poses[edge.j].center() - r.poses[edge.i].center())
            )

        b_near = out_baseline(initialize_pair(edge, near, truth.intrinsics))
        b_far = out_baseline(initialize_pair(edge, far, truth.intrinsics))
        assert b_far == pytest.approx(2.0 * b_near, rel=1e-12)

    def test_zero_baseline_raises(self, survey):
        truth, _, graph, _ = survey
        edge = next(iter(graph.edges.values()))
        same = {edge.i: truth.camera_poses[edge.i], edge.j: truth.camera_poses[edge.i]}
        with pytest.raises(ValueError, match="baseline"):
            initialize_pair(edge, same, truth.intrinsics)


class TestRegisterImage:
    def test_noiseless_pose_matches_truth(self, survey, seed_recon):
        truth, rendered, _, _ = survey
        edge, base = seed_recon
        k = edge.j + 1
        corr = _correspondences_to(truth, rendered, base, k)
        assert len(corr) >= 6
        work = _copy(base)
        pose = register_image(work, k, corr, truth.intrinsics)
        assert pose is not None
        assert k in work.poses
        assert np.linalg.norm(pose.center() - truth.camera_poses[k].center()) < 1e-6
        assert _rotation_error(pose, truth.camera_poses[k]) < 1e-6
        # inlier correspondences joined their tracks as new observations
        appended = [1 for t in work.tracks.values() for img, _, _ in t if img == k]
        assert len(appended) == len(corr)

    def test_below_minimum_support_fails(self, survey, seed_recon):
        truth, rendered, _, _ = survey
        edge, base = seed_recon
        k = edge.j + 1
        corr = _correspondences_to(truth, rendered, base, k)[:5]
        work = _copy(base)
        assert register_image(work, k, corr, truth.intrinsics) is None
        assert k not in work.poses
        assert k in work.failed

    def test_planted_outliers_recovered(self, survey, seed_recon):
        truth, rendered, _, _ = survey
        edge, base = seed_recon
        k = edge.j + 1
        corr_all = _correspondences_to(truth, rendered, base, k)
        bounds = np.array(
            [truth.intrinsics.width - 1.0, truth.intrinsics.height - 1.0]
        )
        rng = np.random.default_rng(1234)
        agreements = []
        for trial in range(100):
            m = len(corr_all)
            bad = np.zeros(m, dtype=bool)
            bad[rng.choice(m, int(round(0.4 * m)), replace=False)] = True
            corr = [
                (lid, feat, rng.uniform(size=2) * bounds if bad[q] else pix)
                for q, (lid, feat, pix) in enumerate(corr_all)
            ]
            work = _copy(base)
            pose = register_image(work, k, corr, truth.intrinsics, seed=trial)
            assert pose is not None
            appended = {f for t in work.tracks.values() for img, f, _ in t if img == k}
            classified = np.array([feat in appended for _, feat, _ in corr])
            agreements.append(np.mean(classified == ~bad))
        assert np.mean(agreements) >= 0.99


class TestReconstructCluster:
    def test_noiseless_cluster_registers_everything(self, cluster30):
        truth, _, recon = cluster30
        assert sorted(recon.poses) == list(range(truth.image_count))
        assert recon.failed == []
        errs = np.array(
            [
                np.linalg.norm(recon.poses[i].center() - truth.camera_poses[i].center())
                for i in range(truth.image_count)
            ]
        )
        ate = float(np.sqrt(np.mean(errs**2)))
        assert ate < 1e-6
        for i in range(truth.image_count):
            assert _rotation_error(recon.poses[i], truth.camera_poses[i]) < 1e-6

    def test_weak_strip_blocks_interior_images(self):
        truth = generate_survey(
            SurveyConfig(track_count=2, track_length=16.0, cross_track=False, seed=7)
        )
        centers = np.array([p.center() for p in truth.camera_poses])
        xs, ys = centers[[3, 4, 5], 0], centers[[3, 4, 5], 1]
        strip = WeakStrip(
            x_range=(xs.min() - 0.5, xs.max() + 0.5),
            y_range=(ys.min() - 0.5, ys.max() + 0.5),
            multiplier=1.0,
        )
        rendered = render_observations(truth, NoiseModel(weak_strips=(strip,)), seed=0)
        graph = build_view_graph(rendered.matches, truth.intrinsics, seed=0, threads=4)
        cluster = Cluster(cluster_id=0, members=list(range(truth.image_count)), overlap=[])
        priors = {i: p for i, p in enumerate(truth.vehicle_poses())}
        recon = reconstruct_cluster(cluster, graph, priors, truth.intrinsics, truth.rig)
        assert recon.failed == [3, 4, 5]
        expected = sorted(set(range(truth.image_count)) - {3, 4, 5})
        assert sorted(recon.poses) == expected

    def test_edge_upgrades(self, cluster30):
        truth, graph, recon = cluster30
        upgraded = [e for e in graph.edges.values() if e.metric_rel_pose is not None]
        assert upgraded
        for edge in upgraded:
            assert 0 <= edge.n_points <= edge.n_matches
            rel_true = compose(
                truth.camera_poses[edge.j], inverse(truth.camera_poses[edge.i])
            )
            # the upgraded relative pose carries metric (non-unit) translation
            assert np.allclose(edge.metric_rel_pose.t, rel_true.t, atol=1e-6)
            assert _rotation_error(edge.metric_rel_pose, rel_true) < 1e-6
        assert any(e.n_points > 0 for e in upgraded)

    def test_reported_rms_matches_recomputation(self, cluster30):
        truth, _, recon = cluster30
        sq_sum, count = 0.0, 0
        for lid, obs in recon.tracks.items():
            for img, _, pixel in obs:
                pix = project(recon.landmarks[lid], truth.intrinsics, recon.poses[img])
                assert pix is not None
                sq_sum += float(np.sum((pix - pixel) ** 2))
                count += 1
        assert abs(np.sqrt(sq_sum / count) - recon.reported_rms_px) < 1e-9

    def test_track_invariants(self, cluster30):
        _, _, recon = cluster30
        assert set(recon.tracks) == set(recon.landmarks)
        for obs in recon.tracks.values():
            assert len(obs) >= 2
            for img, _, _ in obs:
                assert img in recon.poses

    def test_unseedable_cluster_marks_all_failed(self, survey):
        truth, _, graph, _ = survey
        n = truth.image_count
        cluster = Cluster(cluster_id=0, members=list(range(n)), overlap=[])
        same = {i: truth.vehicle_poses()[0] for i in range(n)}
        recon = reconstruct_cluster(cluster, graph, same, truth.intrinsics, truth.rig)
        assert recon.poses == {}
        assert recon.failed == list(range(n))

    def test_deterministic(self, survey):
        truth, _, graph, priors = survey
        cluster = partition(graph)[0]
        runs = [
            reconstruct_cluster(cluster, graph, priors, truth.intrinsics, truth.rig)
            for _ in range(2)
        ]
        assert sorted(runs[0].poses) == sorted(runs[1].poses)
        for img in runs[0].poses:
            assert np.array_equal(runs[0].poses[img].q, runs[1].poses[img].q)
            assert np.array_equal(runs[0].poses[img].t, runs[1].poses[img].t)
        assert sorted(runs[0].landmarks) == sorted(runs[1].landmarks)

    def test_custom_minimum_support_respected(self, survey, seed_recon):
        truth, rendered, _, _ = survey
        edge, base = seed_recon
        k = edge.j + 1
        corr = _correspondences_to(truth, rendered, base, k)[:8]
        work = _copy(base)
        cfg = ReconstructionConfig(min_2d3d=10)
        assert register_image(work, k, corr, truth.intrinsics, cfg) is None
        assert k in work.failed
