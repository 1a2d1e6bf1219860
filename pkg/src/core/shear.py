"""
Shear force estimation from the marker displacement field.

The field is summed per axis, scaled to a dimensionless input and mapped through the
calibrated cubic F_s(x) = c1 x + c2 x^2 + c3 x^3 (newtons). Calibrations are fitted
from paired (x, force) logs by no-intercept least squares.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from src.config import DEFAULT_PX_PER_MM, DEFAULT_SHEAR_COEFFS, DEFAULT_SHEAR_VALID_RANGE
from src.core.tracking import DisplacementField
from src.utils.error_handling import CalibrationError, ConfigurationError, DatasetIOError, InputError

# Set up logging
logger = logging.getLogger(__name__)

MIN_RECOMMENDED_SAMPLES = 10


@dataclass(frozen=True)
class ShearCalibration:
    """
    Calibrated cubic shear map.

    input_scale multiplies the raw pixel sum before evaluation; None selects the
    default 1 / (n_reference_markers * px_per_mm), i.e. mean displacement in mm.
    With `signed` the map is evaluated on |x| and the sign of x is reapplied.
    """

    coeffs: Tuple[float, float, float] = DEFAULT_SHEAR_COEFFS
    input_scale: Optional[float] = None
    valid_range: Tuple[float, float] = DEFAULT_SHEAR_VALID_RANGE
    px_per_mm: float = DEFAULT_PX_PER_MM
    signed: bool = True
    rms_residual: Optional[float] = None

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.coeffs)
        valid_range = tuple(float(v) for v in self.valid_range)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "valid_range", valid_range)

        if len(coeffs) != 3 or not all(math.isfinite(c) for c in coeffs):
            raise CalibrationError(f"Calibration needs three finite coefficients, got {self.coeffs}")
        if len(valid_range) != 2 or not valid_range[0] < valid_range[1] or valid_range[1] <= 0:
            raise CalibrationError(f"Calibration valid_range must be a nonempty [x_min, x_max], got {self.valid_range}")
        if self.px_per_mm <= 0:
            raise ConfigurationError(f"px_per_mm must be > 0, got {self.px_per_mm}")
        if self.input_scale is not None and not self.input_scale > 0:
            raise ConfigurationError(f"input_scale must be > 0, got {self.input_scale}")
        self._check_monotonic()

    def _check_monotonic(self) -> None:
        """F_s must be strictly monotonic on [0, x_max]: F_s' has no root inside."""
        c1, c2, c3 = self.coeffs
        x_max = self.valid_range[1]
        if c1 == 0.0:
            raise CalibrationError("Calibration is flat at x = 0 (c1 == 0)")
        for root in self.derivative_roots():
            if 0.0 < root < x_max:
                raise CalibrationError(
                    f"Calibration is not monotonic on [0, {x_max}]: derivative vanishes at x = {root:.4f}",
                    {"coeffs": list(self.coeffs)},
                )

    def derivative_roots(self) -> Sequence[float]:
        """Real roots of F_s'(x) = c1 + 2 c2 x + 3 c3 x^2."""
        c1, c2, c3 = self.coeffs
        roots = np.roots([3.0 * c3, 2.0 * c2, c1]) if (c3 != 0.0 or c2 != 0.0) else np.empty(0)
        return sorted(float(r.real) for r in np.atleast_1d(roots) if abs(r.imag) < 1e-12)

    def evaluate(self, x: float) -> float:
        """Raw polynomial value, no clamping or sign handling."""
        c1, c2, c3 = self.coeffs
        return x * (c1 + x * (c2 + x * c3))

    def scale_for(self, n_reference_markers: int) -> float:
        if self.input_scale is not None:
            return float(self.input_scale)
        return 1.0 / (max(n_reference_markers, 1) * self.px_per_mm)

    def is_saturated(self, x: float) -> bool:
        x_min, x_max = self.valid_range
        if self.signed:
            magnitude = abs(x)
            return magnitude > x_max or (magnitude != 0.0 and magnitude < x_min)
        return x < x_min or x > x_max

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["coeffs"] = list(self.coeffs)
        data["valid_range"] = list(self.valid_range)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ShearCalibration":
        allowed = {"coeffs", "input_scale", "valid_range", "px_per_mm", "signed", "rms_residual"}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigurationError(f"Unknown calibration keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("coeffs", "valid_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigurationError(f"Invalid calibration document: {e}")

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", encoding="utf-8") as f:
                json.dump(self.to_dict(), f, indent=2, sort_keys=True)
                f.write("\n")
        except OSError as e:
            raise DatasetIOError(f"Could not write calibration to {path}: {e}")
        logger.info(f"Calibration saved to {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ShearCalibration":
        path = Path(path)
        try:
            with path.open("r", encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, ValueError) as e:
            raise ConfigurationError(f"Could not read calibration file {path}: {e}")
        return cls.from_dict(data)


@dataclass(frozen=True)
class ShearEstimate:
    """Per-frame shear: raw pixel sums, scaled input, force in newtons."""

    sum_raw: Tuple[float, float] = (0.0, 0.0)
    x_scaled: Tuple[float, float] = (0.0, 0.0)
    force: Tuple[float, float] = (0.0, 0.0)
    magnitude: float = 0.0
    saturated: bool = False

    @classmethod
    def zero(cls) -> "ShearEstimate":
        return cls()

    def to_json(self, decimals: int = 6) -> Dict[str, Any]:
        return {
            "sx": round(self.force[0], decimals),
            "sy": round(self.force[1], decimals),
            "mag": round(self.magnitude, decimals),
            "saturated": self.saturated,
        }


def sum_field(field: DisplacementField) -> Tuple[float, float]:
    """Sum of matched displacement vectors per axis, in pixels."""
    if len(field) == 0:
        return 0.0, 0.0
    vectors = field.vectors
    return float(np.sum(vectors[:, 0])), float(np.sum(vectors[:, 1]))


def map_shear(x: float, cal: ShearCalibration = ShearCalibration()) -> float:
    """
    Evaluate the calibrated shear map on a scaled sum.

    Inputs outside the valid range are clamped (see ShearCalibration.is_saturated).

    Args:
        x: Scaled vector-field sum along one axis
        cal: Calibration to apply

    Returns:
        Shear force in newtons

    Raises:
        InputError: If x is not finite
    """
    x = float(x)
    if not math.isfinite(x):
        raise InputError(f"Shear input must be finite, got {x}")

    x_min, x_max = cal.valid_range
    if cal.signed:
        if x == 0.0:
            return 0.0
        value = cal.evaluate(min(max(abs(x), x_min), x_max))
        return value if x > 0 else -value
    return cal.evaluate(min(max(x, x_min), x_max))


def estimate_shear(field: DisplacementField, cal: ShearCalibration, n_reference_markers: int) -> ShearEstimate:
    """
    Reduce a displacement field to a ShearEstimate.

    Args:
        field: Matched displacement field
        cal: Calibration (one cubic shared by both axes)
        n_reference_markers: Size of b_0, used by the default input scale

    Returns:
        ShearEstimate with saturation flagged when either axis was clamped
    """
    sx_raw, sy_raw = sum_field(field)
    scale = cal.scale_for(n_reference_markers)
    x, y = sx_raw * scale, sy_raw * scale
    fx, fy = map_shear(x, cal), map_shear(y, cal)
    saturated = cal.is_saturated(x) or cal.is_saturated(y)
    if saturated:
        logger.warning(f"Shear input ({x:.3f}, {y:.3f}) outside calibrated range {cal.valid_range}; clamped")
    return ShearEstimate(
        sum_raw=(sx_raw, sy_raw),
        x_scaled=(x, y),
        force=(fx, fy),
        magnitude=math.hypot(fx, fy),
        saturated=saturated,
    )


def fit_calibration(samples: Iterable[Sequence[float]], px_per_mm: float = DEFAULT_PX_PER_MM,
                    input_scale: Optional[float] = None, signed: bool = True) -> ShearCalibration:
    """
    Least-squares fit of a no-intercept cubic to (x_scaled, force) samples.

    Args:
        samples: Pairs of scaled input and measured force in newtons
        px_per_mm: Image scale recorded in the calibration
        input_scale: Optional fixed input scale recorded in the calibration
        signed: Fit on |x| with the sign of x folded into the force

    Returns:
        ShearCalibration with rms_residual set and valid_range [0, max |x|]

    Raises:
        InputError: For malformed or non-finite samples
        CalibrationError: If the design is rank-deficient or the fit is not monotonic
    """
    data = np.asarray(list(samples), dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != 2 or len(data) == 0:
        raise InputError(f"Calibration samples must be (x, force) pairs, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise InputError("Calibration samples contain non-finite values")

    x, force = data[:, 0], data[:, 1]
    if signed:
        force = np.where(x < 0, -force, force)
        x = np.abs(x)

    design = np.column_stack([x, x ** 2, x ** 3])
    if np.linalg.matrix_rank(design) < 3:
        raise CalibrationError(
            "Calibration design is rank-deficient: need at least three distinct nonzero x values",
            {"samples": len(data)},
        )
    if len(data) < MIN_RECOMMENDED_SAMPLES:
        logger.warning(f"Fitting calibration from only {len(data)} samples (recommended >= {MIN_RECOMMENDED_SAMPLES})")

    coeffs, _, _, _ = np.linalg.lstsq(design, force, rcond=None)
    residual = design @ coeffs - force
    rms = float(np.sqrt(np.mean(residual ** 2)))

    calibration = ShearCalibration(
        coeffs=tuple(float(c) for c in coeffs),
        input_scale=input_scale,
        valid_range=(0.0, float(np.max(x))),
        px_per_mm=px_per_mm,
        signed=signed,
        rms_residual=rms,
    )
    logger.info(f"Fitted calibration coeffs={calibration.coeffs} rms={rms:.4g} N from {len(data)} samples")
    return calibration


def load_samples_csv(path: Union[str, Path]) -> np.ndarray:
    """
    Read (x, force) pairs from a CSV file; a header row is skipped.

    Raises:
        ConfigurationError: If the file cannot be read or holds no numeric rows
    """
    path = Path(path)
    try:
        data = np.genfromtxt(path, delimiter=",", dtype=np.float64)
    except (OSError, ValueError) as e:
        raise ConfigurationError(f"Could not read samples CSV {path}: {e}")
    data = np.atleast_2d(data)
    if data.shape[1] < 2:
        raise ConfigurationError(f"Samples CSV {path} needs at least two columns (x, force)")
    data = data[:, :2]
    data = data[np.all(np.isfinite(data), axis=1)]
    if len(data) == 0:
        raise ConfigurationError(f"Samples CSV {path} contains no numeric rows")
    return data
