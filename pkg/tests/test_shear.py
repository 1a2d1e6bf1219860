"""
Tests for shear mapping, estimation and calibration fitting.
"""

import json
import time

import numpy as np
import pytest

from src.core import shear as shear_module
from src.core.imaging import MarkerSet
from src.core.shear import (
    ShearCalibration,
    estimate_shear,
    fit_calibration,
    load_samples_csv,
    map_shear,
    sum_field,
)
from src.core.tracking import DisplacementField, match_markers
from src.utils.error_handling import CalibrationError, ConfigurationError, InputError

DEFAULT_CUBIC = (2.344, -0.1363, -0.06845)


def _cubic(x):
    c1, c2, c3 = DEFAULT_CUBIC
    return c1 * x + c2 * x ** 2 + c3 * x ** 3


class TestMapShear:
    """Tests for the default cubic map."""

    def test_zero_input(self):
        assert map_shear(0.0) == 0.0

    def test_known_values(self):
        assert map_shear(1.0) == pytest.approx(2.13925, abs=1e-9)
        assert map_shear(2.0) == pytest.approx(3.5952, abs=1e-9)

    def test_signed_mode_is_odd(self):
        assert map_shear(-1.0) == pytest.approx(-2.13925, abs=1e-9)

    def test_clamped_above_range(self):
        assert map_shear(10.0) == pytest.approx(_cubic(2.5))

    def test_monotonic_on_valid_range(self):
        xs = np.linspace(0.0, 2.5, 200)
        values = [map_shear(x) for x in xs]
        assert all(b > a for a, b in zip(values, values[1:]))

    @pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
    def test_non_finite_input(self, bad):
        with pytest.raises(InputError):
            map_shear(bad)


class TestShearCalibration:
    """Tests for calibration validation and persistence."""

    def test_non_monotonic_coefficients_rejected(self):
        """A cubic whose slope vanishes inside the valid range is refused."""
        with pytest.raises(CalibrationError):
            ShearCalibration(coeffs=(1.0, -1.0, 0.0), valid_range=(0.0, 2.0))

    def test_empty_range_rejected(self):
        with pytest.raises(CalibrationError):
            ShearCalibration(valid_range=(1.0, 1.0))

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigurationError):
            ShearCalibration.from_dict({"coeffs": [1, 0, 0], "offset": 2})

    def test_save_and_load(self, temp_dir):
        cal = ShearCalibration(coeffs=(2.0, -0.1, -0.05), valid_range=(0.0, 2.0), input_scale=0.01)
        path = cal.save(f"{temp_dir}/cal.json")
        assert ShearCalibration.load(path) == cal
        document = json.loads(path.read_text())
        assert set(document) >= {"coeffs", "input_scale", "valid_range", "px_per_mm"}

    def test_default_scale_is_mean_displacement_in_mm(self):
        assert ShearCalibration().scale_for(100) == pytest.approx(1.0 / 1600.0)


class TestEstimateShear:
    """Tests for field reduction."""

    def test_empty_field_is_zero(self):
        estimate = estimate_shear(DisplacementField.empty(100), ShearCalibration(), 100)
        assert estimate.force == (0.0, 0.0)
        assert estimate.magnitude == 0.0
        assert not estimate.saturated

    def test_uniform_one_millimetre_field(self, grid_points):
        """Every marker moved 1 mm in +x: x_scaled = 1, force = F(1)."""
        ref = MarkerSet.from_points(grid_points)
        cur = MarkerSet.from_points(grid_points + [16.0, 0.0])
        field = match_markers(ref, cur, 20.0)
        assert sum_field(field) == pytest.approx((1600.0, 0.0))

        estimate = estimate_shear(field, ShearCalibration(), 100)
        assert estimate.x_scaled == pytest.approx((1.0, 0.0))
        assert estimate.force[0] == pytest.approx(2.13925)
        assert estimate.magnitude == pytest.approx(2.13925)

    def test_saturation_flag(self, grid_points):
        ref = MarkerSet.from_points(grid_points[:10])
        cur = MarkerSet.from_points(grid_points[:10] + [19.0, 0.0])
        field = match_markers(ref, cur, 20.0)
        cal = ShearCalibration(input_scale=1.0 / 16.0)
        estimate = estimate_shear(field, cal, 10)
        assert estimate.saturated
        assert estimate.force[0] == pytest.approx(_cubic(2.5))

    def test_json_keys(self):
        assert list(estimate_shear(DisplacementField.empty(), ShearCalibration(), 1).to_json()) == [
            "sx", "sy", "mag", "saturated"]


class TestFitCalibration:
    """Tests for least-squares calibration."""

    def test_exact_samples_recover_coefficients(self):
        xs = np.linspace(0.1, 2.0, 30)
        cal = fit_calibration(np.column_stack([xs, _cubic(xs)]))
        assert cal.coeffs == pytest.approx(DEFAULT_CUBIC, abs=1e-9)
        assert cal.valid_range == (0.0, pytest.approx(2.0))
        assert cal.rms_residual == pytest.approx(0.0, abs=1e-9)

    def test_noisy_recovery_median_over_seeds(self):
        """200 samples with sigma 0.05 N: c1 and the fitted curve within 5% (median over 20 seeds)."""
        grid = np.linspace(0.0, 2.5, 51)
        c1_errors, curve_errors = [], []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            xs = rng.uniform(0.0, 2.5, 200)
            forces = _cubic(xs) + rng.normal(0.0, 0.05, 200)
            start = time.perf_counter()
            cal = fit_calibration(np.column_stack([xs, forces]))
            assert time.perf_counter() - start < 1.0
            c1_errors.append(abs(cal.coeffs[0] - DEFAULT_CUBIC[0]) / DEFAULT_CUBIC[0])
            fitted = np.array([cal.evaluate(x) for x in grid])
            curve_errors.append(np.max(np.abs(fitted - _cubic(grid))) / _cubic(2.5))
        assert np.median(c1_errors) <= 0.05
        assert np.median(curve_errors) <= 0.05

    def test_rank_deficient(self):
        with pytest.raises(CalibrationError):
            fit_calibration([(1.0, 2.0), (1.0, 2.1), (2.0, 3.5)])

    def test_non_finite_samples(self):
        with pytest.raises(InputError):
            fit_calibration([(1.0, float("nan")), (2.0, 3.0), (3.0, 4.0)])

    def test_few_samples_warns(self, mocker):
        warning = mocker.patch.object(shear_module.logger, "warning")
        xs = np.array([0.5, 1.0, 1.5, 2.0])
        fit_calibration(np.column_stack([xs, _cubic(xs)]))
        assert "only 4 samples" in warning.call_args[0][0]

    def test_samples_csv_with_header(self, temp_dir):
        path = f"{temp_dir}/samples.csv"
        with open(path, "w") as f:
            f.write("x,force\n0.5,1.1\n1.0,2.1\n1.5,2.9\n")
        samples = load_samples_csv(path)
        assert samples.shape == (3, 2)
        assert samples[1].tolist() == [1.0, 2.1]
