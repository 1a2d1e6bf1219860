"""
Incipient slip detection.

In-contact marker pairs are registered with a least-squares 2D rigid transform; markers
whose observed position deviates from the rigid prediction by more than a residual
threshold are outliers, and slip is flagged when their count exceeds a threshold.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import cv2
import numpy as np

from src.config import DEFAULT_SLIP_COUNT_THRESHOLD, DEFAULT_SLIP_RESIDUAL_PX
from src.core.imaging import MarkerSet
from src.core.segmentation import ContactMask
from src.core.tracking import DisplacementField
from src.utils.error_handling import ConfigurationError, InputError, InsufficientDataError

# Set up logging
logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RigidTransform2D:
    """
    Rotation about the source centroid followed by translation:
    p' = R(rotation) (p - center) + center + translation.
    """

    rotation: float = 0.0
    translation: Tuple[float, float] = (0.0, 0.0)
    center: Tuple[float, float] = (0.0, 0.0)
    rms_residual: float = 0.0

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return np.array([[c, -s], [s, c]])

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        center = np.asarray(self.center, dtype=np.float64)
        return (points - center) @ self.matrix.T + center + np.asarray(self.translation, dtype=np.float64)

    def to_json(self, decimals: int = 6) -> Dict[str, Any]:
        return {
            "rotation": round(self.rotation, decimals),
            "translation": [round(float(v), decimals) for v in self.translation],
            "rms": round(self.rms_residual, decimals),
        }


@dataclass(frozen=True)
class SlipConfig:
    residual_threshold_px: float = DEFAULT_SLIP_RESIDUAL_PX
    count_threshold: int = DEFAULT_SLIP_COUNT_THRESHOLD
    min_inliers_for_fit: int = 3
    trimmed_refit: bool = False

    def __post_init__(self):
        if self.residual_threshold_px <= 0:
            raise ConfigurationError(f"slip.residual_threshold_px must be > 0, got {self.residual_threshold_px}")
        if self.count_threshold < 0:
            raise ConfigurationError(f"slip.count_threshold must be >= 0, got {self.count_threshold}")
        if self.min_inliers_for_fit < 2:
            raise ConfigurationError(f"slip.min_inliers_for_fit must be >= 2, got {self.min_inliers_for_fit}")


@dataclass(frozen=True)
class SlipReport:
    """Slip verdict for one frame; `transform` is None when no fit was made."""

    slip: bool = False
    outlier_count: int = 0
    outlier_indices: List[int] = field(default_factory=list)
    transform: Optional[RigidTransform2D] = None
    in_contact: int = 0
    insufficient: bool = False

    def to_json(self) -> Dict[str, Any]:
        return {"flag": self.slip, "outliers": self.outlier_count}


@dataclass(frozen=True, eq=False)
class InContactSubset:
    """Matched pairs whose reference marker lies inside the contact region."""

    ref_in: MarkerSet
    cur_in: np.ndarray
    field_in: DisplacementField

    def __len__(self) -> int:
        return len(self.field_in)


def _inside_contact(point: Tuple[float, float], contact: ContactMask) -> bool:
    for k, parent in enumerate(contact.parents):
        if parent != -1:
            continue
        outer = contact.contours[k].reshape(-1, 1, 2).astype(np.float32)
        if cv2.pointPolygonTest(outer, point, False) < 0:
            continue
        in_hole = False
        for h, hole_parent in enumerate(contact.parents):
            if hole_parent != k:
                continue
            hole = contact.contours[h].reshape(-1, 1, 2).astype(np.float32)
            if cv2.pointPolygonTest(hole, point, False) > 0:
                in_hole = True
                break
        if not in_hole:
            return True
    return False


def markers_inside(contact: ContactMask, ref: MarkerSet, field: DisplacementField) -> InContactSubset:
    """
    Keep matched pairs whose reference centroid lies inside a contact contour.

    Contour boundaries count as inside; points strictly inside a hole do not.
    """
    if contact.is_empty() or len(field) == 0:
        rows = np.empty(0, dtype=np.int64)
    else:
        rows = np.array([
            i for i, (x, y) in enumerate(field.ref_points)
            if _inside_contact((float(x), float(y)), contact)
        ], dtype=np.int64)

    field_in = field.subset(rows)
    return InContactSubset(
        ref_in=ref.subset(field_in.ref_indices),
        cur_in=field_in.cur_points,
        field_in=field_in,
    )


def fit_rigid(ref_in, cur_in, min_inliers: int = 3) -> RigidTransform2D:
    """
    Least-squares rigid registration of paired 2D points.

    The rotation maximises the 2x2 cross-covariance of the centred point sets, so
    reflections never occur; translation is the centroid shift.
    The fit is exact for any two non-coincident pairs; `min_inliers` defaults to 3
    so a slip verdict never rests on a single pair of markers.

    Args:
        ref_in: (N, 2) reference positions
        cur_in: (N, 2) current positions, paired row by row
        min_inliers: Minimum number of pairs

    Returns:
        RigidTransform2D centred on the reference centroid

    Raises:
        InputError: For mismatched shapes or non-finite coordinates
        InsufficientDataError: For too few pairs or coincident reference points
    """
    ref = np.asarray(ref_in, dtype=np.float64).reshape(-1, 2)
    cur = np.asarray(cur_in, dtype=np.float64).reshape(-1, 2)
    if ref.shape != cur.shape:
        raise InputError(f"Rigid fit needs paired points, got {len(ref)} and {len(cur)}")
    if len(ref) < min_inliers:
        raise InsufficientDataError(f"Rigid fit needs at least {min_inliers} pairs, got {len(ref)}")
    if not (np.all(np.isfinite(ref)) and np.all(np.isfinite(cur))):
        raise InputError("Rigid fit points contain non-finite values")

    ref_center = ref.mean(axis=0)
    cur_center = cur.mean(axis=0)
    a = ref - ref_center
    b = cur - cur_center
    if not np.any(a):
        raise InsufficientDataError("Rigid fit reference points are coincident")

    cross = a.T @ b
    rotation = math.atan2(cross[0, 1] - cross[1, 0], cross[0, 0] + cross[1, 1])

    transform = RigidTransform2D(
        rotation=rotation,
        translation=(float(cur_center[0] - ref_center[0]), float(cur_center[1] - ref_center[1])),
        center=(float(ref_center[0]), float(ref_center[1])),
    )
    residual = transform.apply(ref) - cur
    rms = float(np.sqrt(np.mean(np.sum(residual ** 2, axis=1))))
    return RigidTransform2D(transform.rotation, transform.translation, transform.center, rms)


def marker_residuals(field_in: DisplacementField, transform: RigidTransform2D) -> np.ndarray:
    """Distance between each observed current position and its rigid prediction."""
    if len(field_in) == 0:
        return np.empty(0)
    delta = field_in.cur_points - transform.apply(field_in.ref_points)
    return np.hypot(delta[:, 0], delta[:, 1])


def detect_slip(field_in: DisplacementField, transform: RigidTransform2D, cfg: SlipConfig = SlipConfig()) -> SlipReport:
    """
    Count rigid-model outliers and apply the strict slip threshold.

    Args:
        field_in: In-contact pairs the transform was fitted on
        transform: Fitted rigid transform
        cfg: Slip thresholds

    Returns:
        SlipReport; outlier_indices are reference marker indices in ascending order
    """
    residuals = marker_residuals(field_in, transform)
    outliers = residuals > cfg.residual_threshold_px
    indices = sorted(int(i) for i in field_in.ref_indices[outliers]) if len(field_in) else []
    count = len(indices)
    return SlipReport(
        slip=count > cfg.count_threshold,
        outlier_count=count,
        outlier_indices=indices,
        transform=transform,
        in_contact=len(field_in),
    )


def evaluate_slip(contact: ContactMask, ref: MarkerSet, field: DisplacementField,
                  cfg: SlipConfig = SlipConfig()) -> SlipReport:
    """
    Slip verdict for one frame: in-contact subset, rigid fit, outlier count.

    No contact yields no slip. A fit that cannot be made yields no slip with
    `insufficient` set.
    """
    if contact.is_empty():
        return SlipReport()

    subset = markers_inside(contact, ref, field)
    try:
        transform = fit_rigid(subset.field_in.ref_points, subset.cur_in, cfg.min_inliers_for_fit)
    except InsufficientDataError as e:
        logger.debug(f"Slip evaluation skipped: {e.message}")
        return SlipReport(in_contact=len(subset), insufficient=True)

    if cfg.trimmed_refit:
        inliers = np.flatnonzero(marker_residuals(subset.field_in, transform) <= cfg.residual_threshold_px)
        if cfg.min_inliers_for_fit <= len(inliers) < len(subset):
            trimmed = subset.field_in.subset(inliers)
            transform = fit_rigid(trimmed.ref_points, trimmed.cur_points, cfg.min_inliers_for_fit)

    report = detect_slip(subset.field_in, transform, cfg)
    if report.slip:
        logger.debug(f"Incipient slip: {report.outlier_count} of {report.in_contact} in-contact markers deviate")
    return report
