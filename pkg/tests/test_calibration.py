"""Depth-indexed distortion model and rectification."""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uwstereo.calibration import (CalibrationError, CameraModel, DepthAnchor,
                                  distort_points, fit_anchor, load_camera_json,
                                  rectify_pair, save_camera_json, undistort,
                                  undistort_points)
from uwstereo.synth import SceneSpec, plane_frame


def two_anchor_model(k1a=-0.10, k1b=-0.05):
    return CameraModel(principal=(320.0, 240.0), baseline=0.06,
                       image_size=(640, 480),
                       anchors=[DepthAnchor(0.5, k1a, 0.02, 700.0),
                                DepthAnchor(0.7, k1b, 0.01, 710.0)])


class TestModel:
    def test_requires_anchor(self):
        with pytest.raises(CalibrationError, match="anchor"):
            CameraModel(principal=(0, 0), baseline=0.1, image_size=(10, 10),
                        anchors=[])

    def test_anchors_strictly_increasing(self):
        with pytest.raises(CalibrationError, match="increase"):
            CameraModel(principal=(0, 0), baseline=0.1, image_size=(10, 10),
                        anchors=[DepthAnchor(0.7, 0, 0, 700),
                                 DepthAnchor(0.5, 0, 0, 700)])

    def test_interpolation_halfway(self):
        m = two_anchor_model()
        k1, k2, f = m.coeffs_at(0.6)
        assert k1 == pytest.approx(-0.075)
        assert k2 == pytest.approx(0.015)
        assert f == pytest.approx(705.0)

    @given(st.floats(0.25, 1.4))
    @settings(max_examples=50, deadline=None)
    def test_interpolation_continuous(self, depth):
        m = two_anchor_model()
        eps = 1e-5
        lo = m.coeffs_at(max(depth - eps, 0.25))
        hi = m.coeffs_at(min(depth + eps, 1.4))
        assert abs(lo[0] - hi[0]) < 1e-4

    def test_clamped_outside_range_with_warning(self):
        m = two_anchor_model()
        with pytest.warns(RuntimeWarning, match="clamping"):
            far = m.coeffs_at(10.0)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            edge = m.coeffs_at(1.4)  # inside [0.25, 1.4]: no warning
        assert far == edge

    def test_json_round_trip(self, tmp_path):
        m = two_anchor_model()
        p = save_camera_json(tmp_path / "calib.json", m)
        back = load_camera_json(p)
        assert back.principal == m.principal
        assert back.baseline == m.baseline
        assert [a.depth for a in back.anchors] == [0.5, 0.7]

    def test_malformed_json_rejected(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{\"principal\": [1, 2]}")
        with pytest.raises(CalibrationError):
            load_camera_json(p)


class TestUndistort:
    def test_principal_point_fixed(self):
        m = two_anchor_model()
        assert undistort(m, 0.6, (320.0, 240.0)) == (320.0, 240.0)

    def test_zero_coefficients_identity(self, rng):
        m = CameraModel(principal=(320.0, 240.0), baseline=0.06,
                        image_size=(640, 480),
                        anchors=[DepthAnchor(0.5, 0.0, 0.0, 700.0)])
        pts = rng.uniform([0, 0], [639, 479], (50, 2))
        np.testing.assert_allclose(undistort_points(m, 0.5, pts), pts, atol=1e-9)

    def test_grid_round_trip_below_1e6_px(self, rng):
        m = two_anchor_model()
        pts = rng.uniform([0, 0], [639, 479], (100, 2))
        back = undistort_points(m, 0.55, distort_points(m, 0.55, pts))
        assert np.abs(back - pts).max() < 1e-6

    @given(k1=st.floats(-0.3, 0.3), k2=st.floats(-0.05, 0.05))
    @settings(max_examples=40, deadline=None)
    def test_round_trip_property(self, k1, k2):
        m = CameraModel(principal=(320.0, 240.0), baseline=0.06,
                        image_size=(640, 480),
                        anchors=[DepthAnchor(0.5, k1, k2, 700.0)])
        gx, gy = np.meshgrid(np.linspace(0, 639, 8), np.linspace(0, 479, 6))
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        back = undistort_points(m, 0.5, distort_points(m, 0.5, pts))
        assert np.abs(back - pts).max() < 1e-6

    def test_fit_anchor_recovers_coefficients(self, rng):
        m = two_anchor_model()
        pts = rng.uniform([50, 50], [590, 430], (80, 2))
        obs = distort_points(m, 0.5, pts)
        k1, k2 = fit_anchor(pts, obs, (320.0, 240.0), 700.0)
        assert k1 == pytest.approx(-0.10, abs=1e-8)
        assert k2 == pytest.approx(0.02, abs=1e-8)


def distort_image(img, model, depth):
    """Render the captured (distorted) view of an ideal image."""
    from scipy import ndimage
    h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    src = undistort_points(model, depth,
                           np.stack([xs.ravel(), ys.ravel()], axis=1))
    out = ndimage.map_coordinates(img.astype(np.float32),
                                  [src[:, 1].reshape(h, w),
                                   src[:, 0].reshape(h, w)], order=1,
                                  mode="nearest")
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


class TestRectify:
    def spec(self):
        return SceneSpec(width=128, height=96, noise=0.0)

    def model(self, k1, w=128, h=96, focal=150.0):
        return CameraModel(principal=(w / 2.0, h / 2.0), baseline=0.06,
                           image_size=(w, h),
                           anchors=[DepthAnchor(0.6, k1, 0.0, focal)])

    def test_distortion_free_pair_unchanged(self):
        f = plane_frame(6, spec=self.spec(), seed=2)
        m = self.model(0.0)
        rect, meta = rectify_pair(m, f.left, f.right, 0.6)
        assert np.abs(rect.left.astype(int) - f.left.astype(int)).max() <= 1
        assert np.abs(rect.right.astype(int) - f.right.astype(int)).max() <= 1
        assert meta.valid_region == (0, 0, 128, 96)

    def test_known_distortion_restores_row_alignment(self):
        f = plane_frame(8, spec=self.spec(), seed=3)
        m = self.model(-0.1)
        cap_l = distort_image(f.left, m, 0.6)
        cap_r = distort_image(f.right, m, 0.6)
        rect, _ = rectify_pair(m, cap_l, cap_r, 0.6)
        # known correspondences: (x, y) in left matches (x - 8, y) in right.
        # verify rows align by locating the best vertical offset of matching
        # texture rows between the rectified views
        errs = []
        for y in range(30, 66, 7):
            row_l = rect.left[y, 20:-20].astype(np.float32)
            candidates = []
            for dy in range(-2, 3):
                row_r = rect.right[y + dy, 12:-28].astype(np.float32)
                candidates.append((np.abs(row_l - row_r).mean(), dy))
            errs.append(min(candidates)[1])
        assert np.abs(np.mean(errs)) < 0.5

    def test_wrong_image_size_rejected(self):
        m = self.model(0.0)
        with pytest.raises(CalibrationError, match="model size"):
            rectify_pair(m, np.zeros((10, 10), np.uint8),
                         np.zeros((10, 10), np.uint8), 0.6)

    def test_valid_region_area_within_10_percent(self):
        m = self.model(-0.08)
        _, meta = rectify_pair(m, np.zeros((96, 128), np.uint8),
                               np.zeros((96, 128), np.uint8), 0.6)
        x0, y0, x1, y1 = meta.valid_region
        area = (x1 - x0) * (y1 - y0)
        assert area >= 0.9 * 128 * 96
