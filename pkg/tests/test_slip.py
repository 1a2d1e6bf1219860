"""
Tests for rigid registration and incipient slip detection.
"""

import numpy as np
import pytest

from src.core.imaging import MarkerSet, Roi
from src.core.segmentation import ContactMask, contact_mask_from_bits
from src.core.slip import (
    RigidTransform2D,
    SlipConfig,
    detect_slip,
    evaluate_slip,
    fit_rigid,
    marker_residuals,
    markers_inside,
)
from src.core.tracking import DisplacementField
from src.utils.error_handling import ConfigurationError, InputError, InsufficientDataError

ROI = Roi(10, 10, 460, 460)


def _field(ref_points, cur_points):
    n = len(ref_points)
    return DisplacementField(
        ref_indices=np.arange(n),
        cur_indices=np.arange(n),
        ref_points=np.asarray(ref_points, dtype=np.float64),
        cur_points=np.asarray(cur_points, dtype=np.float64),
    )


def _full_contact():
    return contact_mask_from_bits(np.ones((480, 480), dtype=bool), ROI)


def _with_outliers(grid_points, indices, offset=(10.0, 0.0), shift=(3.0, -2.0)):
    """Grid translated rigidly with `indices` pushed an extra `offset`."""
    cur = grid_points + shift
    cur[list(indices)] += offset
    return _field(grid_points, cur)


class TestFitRigid:
    """Tests for least-squares rigid registration."""

    def test_recovers_random_transforms(self, grid_points):
        """1000 random rotations and translations on the marker grid, recovered to 1e-6."""
        rng = np.random.default_rng(7)
        center = grid_points.mean(axis=0)
        for _ in range(1000):
            theta = rng.uniform(-0.5, 0.5)
            translation = rng.uniform(-50.0, 50.0, size=2)
            truth = RigidTransform2D(rotation=theta, translation=tuple(translation), center=tuple(center))
            fitted = fit_rigid(grid_points, truth.apply(grid_points))
            assert fitted.rotation == pytest.approx(theta, abs=1e-6)
            assert fitted.translation == pytest.approx(tuple(translation), abs=1e-6)
            assert fitted.rms_residual < 1e-6

    def test_no_reflection(self):
        """Mirrored points give a rotation, never a reflection."""
        ref = np.array([(0.0, 0.0), (10.0, 0.0), (0.0, 5.0)])
        mirrored = ref * [-1.0, 1.0]
        fitted = fit_rigid(ref, mirrored)
        assert np.linalg.det(fitted.matrix) == pytest.approx(1.0)
        assert fitted.rms_residual > 0

    def test_two_points_exact_when_allowed(self):
        ref = np.array([(0.0, 0.0), (10.0, 0.0)])
        truth = RigidTransform2D(rotation=0.3, translation=(4.0, -2.0), center=(5.0, 0.0))
        fitted = fit_rigid(ref, truth.apply(ref), min_inliers=2)
        assert fitted.rotation == pytest.approx(0.3, abs=1e-9)
        assert fitted.translation == pytest.approx((4.0, -2.0), abs=1e-9)
        assert fitted.rms_residual < 1e-9

    def test_collinear_points_exact(self):
        ref = np.array([(100.0 + 40.0 * i, 220.0) for i in range(6)])
        truth = RigidTransform2D(rotation=-0.2, translation=(1.5, 3.0), center=tuple(ref.mean(axis=0)))
        fitted = fit_rigid(ref, truth.apply(ref))
        assert fitted.rotation == pytest.approx(-0.2, abs=1e-9)
        assert fitted.translation == pytest.approx((1.5, 3.0), abs=1e-9)
        assert fitted.rms_residual < 1e-9

    def test_too_few_pairs(self):
        with pytest.raises(InsufficientDataError):
            fit_rigid([(0.0, 0.0), (1.0, 1.0)], [(0.0, 0.0), (1.0, 1.0)])

    def test_coincident_reference_points(self):
        with pytest.raises(InsufficientDataError):
            fit_rigid([(5.0, 5.0)] * 4, [(6.0, 5.0)] * 4)

    def test_mismatched_shapes(self):
        with pytest.raises(InputError):
            fit_rigid([(0.0, 0.0)] * 4, [(0.0, 0.0)] * 3)

    def test_non_finite_points(self):
        with pytest.raises(InputError):
            fit_rigid([(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)], [(0.0, 0.0), (np.nan, 0.0), (0.0, 1.0)])


class TestDetectSlip:
    """Tests for the outlier count threshold."""

    def test_rigid_motion_is_not_slip(self, grid_points):
        field = _with_outliers(grid_points, [])
        report = detect_slip(field, fit_rigid(field.ref_points, field.cur_points))
        assert not report.slip
        assert report.outlier_count == 0
        assert report.in_contact == 100

    def test_six_outliers_is_not_slip(self, grid_points):
        field = _with_outliers(grid_points, range(40, 46))
        report = detect_slip(field, fit_rigid(field.ref_points, field.cur_points))
        assert report.outlier_count == 6
        assert not report.slip

    def test_seven_outliers_is_slip(self, grid_points):
        field = _with_outliers(grid_points, range(40, 47))
        report = detect_slip(field, fit_rigid(field.ref_points, field.cur_points))
        assert report.outlier_count == 7
        assert report.slip
        assert report.outlier_indices == list(range(40, 47))

    def test_residual_threshold_is_strict(self):
        ref = np.array([(0.0, 0.0), (100.0, 0.0), (0.0, 100.0), (100.0, 100.0)])
        field = _field(ref, ref)
        identity = RigidTransform2D(center=(50.0, 50.0))
        shifted = _field(ref, ref + [[3.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
        assert marker_residuals(field, identity).tolist() == [0.0] * 4
        assert detect_slip(shifted, identity, SlipConfig(count_threshold=0)).outlier_count == 0

    def test_json(self):
        assert detect_slip(_field(np.empty((0, 2)), np.empty((0, 2))), RigidTransform2D()).to_json() == {
            "flag": False, "outliers": 0}


class TestEvaluateSlip:
    """Tests for the per-frame slip verdict."""

    def test_empty_contact_is_no_slip(self, grid_points):
        field = _with_outliers(grid_points, range(40, 50))
        report = evaluate_slip(ContactMask.empty(480, 480), MarkerSet.from_points(grid_points), field)
        assert not report.slip
        assert report.transform is None

    def test_full_contact_with_outliers(self, grid_points):
        field = _with_outliers(grid_points, range(40, 47))
        report = evaluate_slip(_full_contact(), MarkerSet.from_points(grid_points), field)
        assert report.slip
        assert report.in_contact == 100

    def test_too_few_in_contact_markers(self, grid_points):
        bits = np.zeros((480, 480), dtype=bool)
        bits[50:70, 50:110] = True  # covers two markers
        contact = contact_mask_from_bits(bits, ROI)
        field = _with_outliers(grid_points, [])
        report = evaluate_slip(contact, MarkerSet.from_points(grid_points), field)
        assert report.insufficient
        assert not report.slip
        assert report.in_contact == 2

    def test_trimmed_refit_sharpens_inliers(self, grid_points):
        field = _with_outliers(grid_points, range(40, 47), offset=(30.0, 0.0))
        ref = MarkerSet.from_points(grid_points)
        plain = evaluate_slip(_full_contact(), ref, field)
        trimmed = evaluate_slip(_full_contact(), ref, field, SlipConfig(trimmed_refit=True))
        assert trimmed.outlier_count == plain.outlier_count == 7
        assert trimmed.transform.translation == pytest.approx((3.0, -2.0), abs=1e-9)

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            SlipConfig(residual_threshold_px=0)
        with pytest.raises(ConfigurationError):
            SlipConfig(min_inliers_for_fit=1)


class TestMarkersInside:
    def test_markers_in_hole_are_excluded(self, grid_points):
        bits = np.zeros((480, 480), dtype=bool)
        bits[40:440, 40:440] = True
        bits[200:280, 200:280] = False  # hole around the four central markers
        contact = contact_mask_from_bits(bits, ROI)
        subset = markers_inside(contact, MarkerSet.from_points(grid_points), _with_outliers(grid_points, []))
        assert len(subset) == 96
        assert not {44, 45, 54, 55} & set(subset.field_in.ref_indices.tolist())
