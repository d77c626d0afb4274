import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from navsfm.camera import (
    CameraIntrinsics,
    project,
    project_batch,
    project_camera_frame,
    project_jacobians,
    unproject,
)
from navsfm.geometry import Pose, retract

from conftest import default_intrinsics, random_pose
from oracles import finite_difference_jacobian, jacobian_relative_error


def random_in_frustum(rng, n, max_theta=1.0, depth_range=(0.5, 20.0)):
    """Random camera-frame points within max_theta of the optical axis."""
    theta = rng.uniform(0.0, max_theta, size=n)
    az = rng.uniform(0, 2 * np.pi, size=n)
    depth = rng.uniform(*depth_range, size=n)
    d = np.column_stack(
        [np.sin(theta) * np.cos(az), np.sin(theta) * np.sin(az), np.cos(theta)]
    )
    return d * depth[:, None]


class TestProjection:
    def test_axis_point_hits_principal_point(self):
        K = default_intrinsics(distorted=False)
        pix = project(np.array([0.0, 0.0, 1.0]), K, Pose.identity())
        assert np.allclose(pix, [K.cx, K.cy], atol=1e-12)

    def test_forty_five_degrees_equidistant_radius(self):
        # closed-form equidistant model: radius = f * theta
        K = default_intrinsics(distorted=False)
        pix = project(np.array([1.0, 0.0, 1.0]), K, Pose.identity())
        radius = np.linalg.norm(pix - np.array([K.cx, K.cy]))
        assert abs(radius - K.fx * np.arctan(1.0)) < 1e-9
        assert pix[1] == pytest.approx(K.cy, abs=1e-9)
        assert pix[0] > K.cx  # azimuth preserved

    def test_azimuth_direction(self, rng):
        K = default_intrinsics(distorted=False)
        for _ in range(20):
            pt = random_in_frustum(rng, 1)[0]
            pix = project(pt, K, Pose.identity())
            offset = pix - np.array([K.cx, K.cy])
            azimuth = np.arctan2(pt[1], pt[0])
            assert abs(np.arctan2(offset[1], offset[0]) - azimuth) < 1e-9

    def test_behind_camera_signal(self):
        K = default_intrinsics()
        assert project(np.array([0.0, 0.0, -1.0]), K, Pose.identity()) is None
        assert project(np.array([1.0, 1.0, 0.0]), K, Pose.identity()) is None
        pix, valid = project_batch(
            np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]), K, Pose.identity()
        )
        assert valid.tolist() == [True, False]
        assert np.all(np.isnan(pix[1]))

    def test_unproject_project_round_trip(self, rng):
        # iterative undistortion oracle: the recovered ray must pass through X
        K = default_intrinsics(distorted=True)
        pts = random_in_frustum(rng, 1000)
        pix, valid = project_camera_frame(pts, K)
        assert valid.all()
        rays = unproject(pix, K)
        want = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        assert np.max(np.linalg.norm(rays - want, axis=1)) < 1e-9

    def test_unproject_returns_unit_rays(self, rng):
        K = default_intrinsics()
        pix = rng.uniform(100, 900, size=(100, 2))
        rays = unproject(pix, K)
        assert np.allclose(np.linalg.norm(rays, axis=1), 1.0, atol=1e-12)

    def test_world_frame_projection(self, rng):
        K = default_intrinsics()
        T = random_pose(rng, trans_scale=2.0)
        X_cam = random_in_frustum(rng, 1)[0]
        X_world = T.inverse().transform(X_cam)
        pix = project(X_world, K, T)
        pix_direct, _ = project_camera_frame(X_cam.reshape(1, 3), K)
        assert np.allclose(pix, pix_direct[0], atol=1e-9)

    @given(st.floats(0.01, 1.2), st.floats(0.0, 2 * np.pi), st.floats(0.5, 30.0))
    def test_projection_finite_in_frustum(self, theta, az, depth):
        K = default_intrinsics()
        pt = depth * np.array(
            [np.sin(theta) * np.cos(az), np.sin(theta) * np.sin(az), np.cos(theta)]
        )
        pix = project(pt, K, Pose.identity())
        assert pix is not None and np.all(np.isfinite(pix))


class TestIntrinsicsValidation:
    def test_rejects_bad_focal(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=-1.0, fy=600.0, cx=512, cy=384, width=1024, height=768)

    def test_rejects_principal_point_outside(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=600.0, fy=600.0, cx=2000, cy=384, width=1024, height=768)

    def test_param_vector_round_trip(self):
        K = default_intrinsics()
        K2 = K.with_params(K.param_vector())
        assert np.allclose(K2.param_vector(), K.param_vector())
        assert (K2.width, K2.height) == (K.width, K.height)


class TestProjectionJacobians:
    def test_jacobians_match_finite_differences(self, rng):
        K = default_intrinsics(distorted=True)
        worst = 0.0
        for _ in range(250):
            T = random_pose(rng, trans_scale=1.0)
            X_cam = random_in_frustum(rng, 1, max_theta=1.1)[0]
            X = T.inverse().transform(X_cam)
            pix, J_pose, J_point, J_intr = project_jacobians(X, K, T)
            assert pix is not None

            fd_pose = finite_difference_jacobian(
                lambda d: project(X, K, retract(T, d)), np.zeros(6)
            )
            fd_point = finite_difference_jacobian(lambda dx: project(X + dx, K, T), np.zeros(3))
            fd_intr = finite_difference_jacobian(
                lambda dk: project(X, K.with_params(K.param_vector() + dk), T),
                np.zeros(8),
                h=1e-5,
            )
            worst = max(
                worst,
                jacobian_relative_error(J_pose, fd_pose),
                jacobian_relative_error(J_point, fd_point),
                jacobian_relative_error(J_intr, fd_intr),
            )
        assert worst < 1e-5

    def test_on_axis_jacobian_finite(self):
        K = default_intrinsics()
        pix, J_pose, J_point, J_intr = project_jacobians(
            np.array([0.0, 0.0, 2.0]), K, Pose.identity()
        )
        assert np.allclose(pix, [K.cx, K.cy])
        assert np.all(np.isfinite(J_pose)) and np.all(np.isfinite(J_point))
        # pinhole limit at the axis: d(pixel)/d(x) = f/z
        assert J_point[0, 0] == pytest.approx(K.fx / 2.0, rel=1e-9)

    def test_behind_camera_jacobians_zero(self):
        K = default_intrinsics()
        pix, J_pose, J_point, J_intr = project_jacobians(
            np.array([0.0, 0.0, -2.0]), K, Pose.identity()
        )
        assert pix is None
        assert not J_pose.any() and not J_point.any() and not J_intr.any()
