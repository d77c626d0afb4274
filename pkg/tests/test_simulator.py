"""Survey simulator: determinism, geometry, noise statistics, bookkeeping."""

import numpy as np
import pytest
from scipy.optimize import brentq

from navsfm.camera import project
from navsfm.simulator import (
    NoiseModel,
    SurveyConfig,
    SurveyConfigError,
    WeakStrip,
    corrupt_navigation,
    covisible_landmarks,
    default_intrinsics,
    generate_survey,
    render_observations,
    strip_image_mask,
)
from navsfm.geometry import rotation_angle, quat_multiply, quat_conjugate


SMALL = SurveyConfig(
    track_count=2,
    track_length=18.0,
    track_spacing=5.0,
    altitude=8.0,
    image_interval=2.0,
    cross_track=True,
    landmark_density=0.5,
    seed=7,
)


@pytest.fixture(scope="module")
def small_truth():
    return generate_survey(SMALL)


def _edge_half_fov_oracle(intr, margin):
    # independent solve of theta_d(theta) = r_edge / f for the usable cone
    r_edge = min(intr.cx, intr.cy, intr.width - 1 - intr.cx, intr.height - 1 - intr.cy)
    target = r_edge / min(intr.fx, intr.fy)
    k1, k2, k3, k4 = intr.k

    def f(t):
        return t * (1 + k1 * t**2 + k2 * t**4 + k3 * t**6 + k4 * t**8) - target

    return margin * brentq(f, 0.0, 1.5)


class TestGenerate:
    def test_same_seed_bit_identical(self):
        a = generate_survey(SMALL)
        b = generate_survey(SMALL)
        assert np.array_equal(a.landmarks, b.landmarks)
        for pa, pb in zip(a.camera_poses, b.camera_poses):
            assert np.array_equal(pa.q, pb.q) and np.array_equal(pa.t, pb.t)
        for (ia, xa), (ib, xb) in zip(a.observations, b.observations):
            assert np.array_equal(ia, ib) and np.array_equal(xa, xb)

    def test_different_seed_differs(self):
        a = generate_survey(SMALL)
        b = generate_survey(SurveyConfig(**{**SMALL.__dict__, "seed": 8}))
        assert not np.array_equal(a.landmarks, b.landmarks)

    def test_observations_reproject_exactly(self, small_truth):
        t = small_truth
        rng = np.random.default_rng(0)
        for img in rng.choice(t.image_count, size=8, replace=False):
            ids, pix = t.observations[img]
            assert len(ids) > 10
            take = rng.choice(len(ids), size=min(20, len(ids)), replace=False)
            for k in take:
                reproj = project(t.landmarks[ids[k]], t.intrinsics, t.camera_poses[img])
                assert reproj is not None
                assert np.linalg.norm(reproj - pix[k]) < 1e-12
            assert np.all(pix[:, 0] >= 0) and np.all(pix[:, 0] <= t.intrinsics.width - 1)
            assert np.all(pix[:, 1] >= 0) and np.all(pix[:, 1] <= t.intrinsics.height - 1)

    def test_adjacent_same_track_pairs_share_landmarks(self, small_truth):
        t = small_truth
        # [DERIVED] frustum-overlap oracle: adjacent footprint disks overlap
        theta = _edge_half_fov_oracle(t.intrinsics, t.config.fov_margin)
        r_foot = (t.config.altitude - t.config.terrain_amplitude) * np.tan(theta)
        assert 2 * r_foot > t.config.image_interval  # oracle: overlap exists
        n_cols = int(t.config.track_length / t.config.image_interval) + 1
        for track in range(t.config.track_count):
            for col in range(n_cols - 1):
                i = track * n_cols + col
                assert len(covisible_landmarks(t, i, i + 1)) >= 1

    def test_cross_track_shares_with_every_track(self, small_truth):
        t = small_truth
        n_cols = int(t.config.track_length / t.config.image_interval) + 1
        n_main = t.config.track_count * n_cols
        cross = range(n_main, t.image_count)
        for track in range(t.config.track_count):
            members = range(track * n_cols, (track + 1) * n_cols)
            shared = any(
                len(covisible_landmarks(t, i, j)) >= 1 for i in members for j in cross
            )
            assert shared, f"cross-track shares nothing with track {track}"

    def test_centered_at_origin(self, small_truth):
        centers = np.array([p.center() for p in small_truth.vehicle_poses()])
        assert np.linalg.norm(centers.mean(axis=0)) < 1e-9

    def test_overlap_invariant_rejected(self):
        with pytest.raises(SurveyConfigError, match="swath"):
            generate_survey(
                SurveyConfig(track_count=2, track_spacing=30.0, altitude=8.0)
            )

    def test_bad_config_values(self):
        with pytest.raises(SurveyConfigError):
            SurveyConfig(track_length=-1.0)
        with pytest.raises(SurveyConfigError):
            SurveyConfig(terrain_amplitude=7.0, altitude=8.0)
        with pytest.raises(SurveyConfigError):
            SurveyConfig(fov_margin=0.0)


WIDE = SurveyConfig(
    track_count=10,
    track_length=98.0,
    track_spacing=5.0,
    altitude=8.0,
    image_interval=2.0,
    cross_track=True,
    landmark_density=0.02,
    seed=3,
)


class TestCorruptNavigation:
    def test_zero_noise_exact(self, small_truth):
        priors = corrupt_navigation(small_truth, NoiseModel(), seed=5)
        for prior, veh in zip(priors, small_truth.vehicle_poses()):
            assert np.array_equal(prior.q, veh.q)
            assert np.array_equal(prior.t, veh.t)

    def test_position_rmse_matches_chi_expectation(self):
        # [DERIVED] E||dx||^2 = 3 sigma^2 for isotropic Gaussian noise
        truth = generate_survey(WIDE)
        assert truth.image_count >= 500
        priors = corrupt_navigation(
            truth, NoiseModel(nav_pos_sigma_m=0.5), seed=11
        )
        veh = truth.vehicle_poses()
        errs = np.array([p.center() - v.center() for p, v in zip(priors, veh)])
        rmse = np.sqrt((errs**2).sum(axis=1).mean())
        assert 0.4 * np.sqrt(3) <= rmse <= 0.6 * np.sqrt(3)

    def test_rotation_rmse_scale(self):
        truth = generate_survey(WIDE)
        priors = corrupt_navigation(truth, NoiseModel(nav_rot_sigma_deg=1.0), seed=2)
        angles = [
            rotation_angle(quat_multiply(quat_conjugate(v.q), p.q))
            for p, v in zip(priors, truth.vehicle_poses())
        ]
        rms = np.degrees(np.sqrt(np.mean(np.square(angles))))
        # sigma = 1 deg per axis -> expected RMS angle magnitude sqrt(3) deg
        assert 0.8 * np.sqrt(3) <= rms <= 1.2 * np.sqrt(3)

    def test_drift_grows_along_trajectory(self, small_truth):
        # [DERIVED] random-walk variance grows linearly in elapsed time
        grew = 0
        for seed in (0, 1, 2, 3, 4):
            priors = corrupt_navigation(
                small_truth, NoiseModel(nav_drift_rate_m=0.05), seed=seed
            )
            err = np.array(
                [
                    np.linalg.norm(p.center() - v.center())
                    for p, v in zip(priors, small_truth.vehicle_poses())
                ]
            )
            half = len(err) // 2
            if err[half:].mean() > err[:half].mean():
                grew += 1
        assert grew >= 4

    def test_noise_model_validation(self):
        with pytest.raises(ValueError):
            NoiseModel(nav_pos_sigma_m=-0.1)
        with pytest.raises(ValueError):
            NoiseModel(outlier_fraction=1.5)
        with pytest.raises(ValueError):
            WeakStrip(multiplier=2.0)


class TestRenderObservations:
    def test_zero_noise_counts_equal_covisibility(self, small_truth):
        t = small_truth
        rendered = render_observations(t, NoiseModel(), seed=0)
        # every covisible pair appears with exactly the covisible count
        for i in range(t.image_count):
            for j in range(i + 1, t.image_count):
                n_cov = len(covisible_landmarks(t, i, j))
                pm = rendered.matches.pairs.get((i, j))
                if n_cov == 0:
                    assert pm is None
                else:
                    assert pm is not None and len(pm) == n_cov

    def test_zero_noise_pixels_exact(self, small_truth):
        t = small_truth
        rendered = render_observations(t, NoiseModel(), seed=0)
        (i, j), pm = next(iter(sorted(rendered.matches.pairs.items())))
        lm = rendered.feature_landmarks[i][pm.feat_i]
        ids_i, pix_i = t.observations[i]
        lookup = dict(zip(ids_i.tolist(), pix_i))
        for l, p in zip(lm, pm.pix_i):
            assert np.array_equal(lookup[l], p)

    def test_outlier_fraction_measured(self, small_truth):
        noise = NoiseModel(outlier_fraction=0.3)
        rendered = render_observations(small_truth, noise, seed=1)
        labels = np.concatenate(list(rendered.inlier_labels.values()))
        assert len(labels) > 5000
        frac = 1.0 - labels.mean()
        assert abs(frac - 0.30) <= 0.02

    def test_outlier_features_are_fresh_indices(self, small_truth):
        rendered = render_observations(small_truth, NoiseModel(outlier_fraction=0.2), seed=1)
        for (i, j), pm in rendered.matches.pairs.items():
            lab = rendered.inlier_labels[(i, j)]
            lm_i = rendered.feature_landmarks[i][pm.feat_i]
            assert np.all(lm_i[~lab] == -1)
            assert np.all(lm_i[lab] >= 0)

    def test_weak_strip_suppresses_matches(self, small_truth):
        t = small_truth
        centers = np.array([p.center() for p in t.camera_poses])
        # strip over columns 4..7 of track 0 (images 4..7)
        xs = centers[4:8, 0]
        y0 = centers[0, 1]
        strip = WeakStrip(
            x_range=(xs.min() - 0.1, xs.max() + 0.1),
            y_range=(y0 - 0.1, y0 + 0.1),
            multiplier=0.9,
        )
        mask = strip_image_mask(t, (strip,))
        assert mask[4:8].all() and mask.sum() == 4
        rendered = render_observations(t, NoiseModel(weak_strips=(strip,)), seed=0)
        inside = rendered.matches.pairs.get((5, 6))
        outside = rendered.matches.pairs.get((1, 2))
        n_inside = 0 if inside is None else len(inside)
        assert outside is not None and len(outside) > 30
        assert n_inside < 0.2 * len(outside)

    def test_dropout_thins_observations(self, small_truth):
        t = small_truth
        clean = render_observations(t, NoiseModel(), seed=0)
        dropped = render_observations(t, NoiseModel(dropout_fraction=0.5), seed=0)
        n_clean = sum(len(pm) for pm in clean.matches.pairs.values())
        n_drop = sum(len(pm) for pm in dropped.matches.pairs.values())
        # pair survival scales ~ (1 - dropout)^2
        assert 0.15 * n_clean < n_drop < 0.4 * n_clean

    def test_noise_streams_are_independent(self, small_truth):
        t = small_truth
        base = render_observations(t, NoiseModel(pixel_sigma_px=0.5), seed=4)
        with_outliers = render_observations(
            t, NoiseModel(pixel_sigma_px=0.5, outlier_fraction=0.3), seed=4
        )
        # toggling outliers must not reshuffle pixel noise of genuine matches
        for key, pm in base.matches.pairs.items():
            pm2 = with_outliers.matches.pairs[key]
            lab = with_outliers.inlier_labels[key]
            assert np.array_equal(pm2.pix_i[lab], pm.pix_i[lab])
            assert np.array_equal(pm2.feat_j[lab], pm.feat_j[lab])

    def test_dropout_does_not_reshuffle_pixel_noise(self, small_truth):
        t = small_truth
        full = render_observations(t, NoiseModel(pixel_sigma_px=0.5), seed=4)
        thin = render_observations(
            t, NoiseModel(pixel_sigma_px=0.5, dropout_fraction=0.4), seed=4
        )
        key = next(iter(sorted(thin.matches.pairs)))
        i, j = key
        pm_thin = thin.matches.pairs[key]
        pm_full = full.matches.pairs[key]
        lm_thin = thin.feature_landmarks[i][pm_thin.feat_i]
        lm_full = full.feature_landmarks[i][pm_full.feat_i]
        common, a_idx, b_idx = np.intersect1d(lm_thin, lm_full, return_indices=True)
        assert len(common) > 0
        assert np.array_equal(pm_thin.pix_i[a_idx], pm_full.pix_i[b_idx])

    def test_pixel_noise_statistics(self, small_truth):
        t = small_truth
        noisy = render_observations(t, NoiseModel(pixel_sigma_px=0.5), seed=9)
        clean = render_observations(t, NoiseModel(), seed=9)
        deltas = []
        for key, pm in clean.matches.pairs.items():
            pm2 = noisy.matches.pairs[key]
            deltas.append(pm2.pix_i - pm.pix_i)
        d = np.concatenate(deltas).ravel()
        assert 0.45 < d.std() < 0.55
        assert abs(d.mean()) < 0.02

    def test_render_deterministic(self, small_truth):
        a = render_observations(small_truth, NoiseModel(pixel_sigma_px=0.3), seed=2)
        b = render_observations(small_truth, NoiseModel(pixel_sigma_px=0.3), seed=2)
        for key, pm in a.matches.pairs.items():
            pm2 = b.matches.pairs[key]
            assert np.array_equal(pm.pix_i, pm2.pix_i)
            assert np.array_equal(pm.feat_i, pm2.feat_i)
