from dataclasses import replace

import numpy as np
import pytest

from app.errors import ConfigError
from app.geometry import (
    CameraModel,
    PointCloud,
    back_project,
    default_rig,
    perturb_extrinsics,
    project_points,
    rig_from_json,
    rig_to_json,
    rotation_angle_deg,
    round_half_away,
)
from app.models import NoiseSpec


class TestProjectPoints:
    def test_on_axis_point_hits_principal_point(self, axis_camera):
        proj = project_points(PointCloud(np.array([[0.0, 0.0, 10.0]])), axis_camera)
        assert proj.u[0] == pytest.approx(352.0)
        assert proj.v[0] == pytest.approx(128.0)
        assert proj.z[0] == pytest.approx(10.0)
        assert proj.valid[0]

    def test_off_axis_point(self, axis_camera):
        proj = project_points(PointCloud(np.array([[2.0, 1.0, 10.0]])), axis_camera)
        assert (proj.u[0], proj.v[0], proj.z[0]) == pytest.approx((452.0, 178.0, 10.0))

    def test_point_behind_camera_is_invalid(self, axis_camera):
        proj = project_points(PointCloud(np.array([[0.0, 0.0, -5.0], [0.0, 0.0, 0.0]])), axis_camera)
        assert not proj.valid.any()

    def test_out_of_frame_is_invalid(self, axis_camera):
        proj = project_points(PointCloud(np.array([[100.0, 0.0, 10.0]])), axis_camera)
        assert not proj.valid[0]

    def test_downsample_factor_scales_pixels(self, axis_camera):
        half = replace(axis_camera, h=0.5)
        pts = PointCloud(np.array([[2.0, 1.0, 10.0]]))
        full_proj = project_points(pts, axis_camera)
        half_proj = project_points(pts, half)
        assert half_proj.u[0] == pytest.approx(0.5 * full_proj.u[0])
        assert half_proj.v[0] == pytest.approx(0.5 * full_proj.v[0])

    @pytest.mark.parametrize("seed", range(5))
    def test_round_trip_through_back_projection(self, small_rig, seed):
        rng = np.random.default_rng(seed)
        cam = small_rig[seed % len(small_rig)]
        forward = cam.center + 8.0 * cam.R[2]
        pts = forward + rng.uniform(-2.0, 2.0, size=(200, 3))
        proj = project_points(PointCloud(pts), cam)
        restored = back_project(proj.u, proj.v, proj.z, cam)
        np.testing.assert_allclose(restored, pts, atol=1e-9)


def test_round_half_away_from_zero():
    np.testing.assert_array_equal(round_half_away(np.array([0.5, 1.5, 2.4, -0.5, np.nan])), [1, 2, 2, -1, -1])


class TestCameraModel:
    def test_rejects_improper_rotation(self, axis_camera):
        with pytest.raises(ConfigError):
            CameraModel(K=axis_camera.K, R=np.diag([1.0, 1.0, -1.0]), T=np.zeros(3))

    def test_rejects_skewed_intrinsics(self):
        K = np.array([[500.0, 1.0, 10.0], [0.0, 500.0, 10.0], [0.0, 0.0, 1.0]])
        with pytest.raises(ConfigError):
            CameraModel(K=K, R=np.eye(3), T=np.zeros(3))

    def test_rejects_non_positive_downsample(self, axis_camera):
        with pytest.raises(ConfigError):
            CameraModel(K=axis_camera.K, R=np.eye(3), T=np.zeros(3), h=0.0)


class TestPerturbExtrinsics:
    def test_is_deterministic(self, axis_camera):
        noise = NoiseSpec(sigma_rot_deg=1.0, sigma_trans_m=0.1)
        a = perturb_extrinsics(axis_camera, noise, seed=7)
        b = perturb_extrinsics(axis_camera, noise, seed=7)
        np.testing.assert_array_equal(a.R, b.R)
        np.testing.assert_array_equal(a.T, b.T)

    def test_zero_noise_is_identity(self, axis_camera):
        out = perturb_extrinsics(axis_camera, NoiseSpec.zero(), seed=3)
        np.testing.assert_array_equal(out.R, axis_camera.R)
        np.testing.assert_array_equal(out.T, axis_camera.T)

    def test_rotation_stays_within_five_sigma(self, axis_camera):
        noise = NoiseSpec(sigma_rot_deg=1.0, sigma_trans_m=0.0)
        for seed in range(1000):
            out = perturb_extrinsics(axis_camera, noise, seed=seed)
            assert rotation_angle_deg(axis_camera.R, out.R) <= 5.0, f"seed={seed}"
            np.testing.assert_allclose(out.R @ out.R.T, np.eye(3), atol=1e-9)
            np.testing.assert_array_equal(out.T, axis_camera.T)


class TestRig:
    def test_default_rig_headings(self):
        rig = default_rig()
        assert len(rig) == 6
        forwards = np.array([cam.R[2] for cam in rig])
        headings = np.degrees(np.arctan2(forwards[:, 1], forwards[:, 0])) % 360.0
        np.testing.assert_allclose(headings, [0, 60, 120, 180, 240, 300], atol=1e-9)
        np.testing.assert_allclose([cam.center[2] for cam in rig], 1.5)

    def test_json_round_trip(self, small_rig):
        restored = rig_from_json(rig_to_json(small_rig))
        assert [cam.name for cam in restored] == [cam.name for cam in small_rig]
        for a, b in zip(restored, small_rig):
            np.testing.assert_allclose(a.R, b.R)
            np.testing.assert_allclose(a.K, b.K)
            assert a.image_size == b.image_size

    @pytest.mark.parametrize("payload", [{}, {"cameras": []}, {"cameras": [{"K": [1, 0, 0]}]}])
    def test_malformed_rig(self, payload):
        with pytest.raises(ConfigError):
            rig_from_json(payload)
