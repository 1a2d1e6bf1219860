"""
Sensor and scene geometry for the synthetic visuotactile sensor.

Millimetre coordinates are centred on the marker grid with y pointing down, like
the image. Pixel (row r, col c) has its centre at (x=c, y=r).
"""

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, Optional, Sequence, Tuple

import cv2
import numpy as np

from src.config import (
    DEFAULT_DOT_RADIUS_PX,
    DEFAULT_FRAME_HEIGHT,
    DEFAULT_FRAME_WIDTH,
    DEFAULT_PX_PER_MM,
    DEFAULT_ROI_BORDER_PX,
    DEFAULT_SLIP_COUNT_THRESHOLD,
    DEFAULT_SLIP_RESIDUAL_PX,
    GRID_COLS,
    GRID_ROWS,
    MARKER_PITCH_MM,
)
from src.core.imaging import BinaryMask, Roi
from src.utils.error_handling import SpecError

# Set up logging
logger = logging.getLogger(__name__)

SHAPES = ("none", "full", "circle", "rectangle", "hexagon", "cross", "polygon")
DEPTH_RANGE_MM = (0.1, 1.0)


@dataclass(frozen=True)
class SensorModel:
    """Camera image, marker grid and colours of the simulated membrane."""

    width: int = DEFAULT_FRAME_WIDTH
    height: int = DEFAULT_FRAME_HEIGHT
    rows: int = GRID_ROWS
    cols: int = GRID_COLS
    pitch_mm: float = MARKER_PITCH_MM
    px_per_mm: float = DEFAULT_PX_PER_MM
    dot_radius_px: float = DEFAULT_DOT_RADIUS_PX
    background: Tuple[int, int, int] = (190, 190, 190)
    marker_color: Tuple[int, int, int] = (205, 35, 35)
    contact_color: Tuple[int, int, int] = (120, 160, 150)
    noise_sigma: float = 0.0
    attenuation_sigma_px: float = 15.0
    supersample: int = 4
    roi_border_px: int = DEFAULT_ROI_BORDER_PX

    def __post_init__(self):
        for name in ("background", "marker_color", "contact_color"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.width <= 0 or self.height <= 0:
            raise SpecError(f"Image size must be positive, got {self.width}x{self.height}")
        if self.rows < 1 or self.cols < 1:
            raise SpecError(f"Marker grid must be at least 1x1, got {self.rows}x{self.cols}")
        if self.px_per_mm <= 0 or self.pitch_mm <= 0 or self.dot_radius_px <= 0:
            raise SpecError("pitch_mm, px_per_mm and dot_radius_px must be positive")
        if self.pitch_px < 4 * self.dot_radius_px:
            raise SpecError(
                f"Marker pitch {self.pitch_px:g} px is below four dot radii ({4 * self.dot_radius_px:g} px)"
            )
        half_w = (self.cols - 1) / 2.0 * self.pitch_px + self.dot_radius_px + 1
        half_h = (self.rows - 1) / 2.0 * self.pitch_px + self.dot_radius_px + 1
        if half_w > (self.width - 1) / 2.0 or half_h > (self.height - 1) / 2.0:
            raise SpecError(f"A {self.rows}x{self.cols} grid does not fit a {self.width}x{self.height} image")
        if self.noise_sigma < 0 or self.attenuation_sigma_px <= 0 or self.supersample < 1:
            raise SpecError("noise_sigma >= 0, attenuation_sigma_px > 0 and supersample >= 1 are required")

    @property
    def pitch_px(self) -> float:
        return self.pitch_mm * self.px_per_mm

    @property
    def center_px(self) -> Tuple[float, float]:
        return (self.width - 1) / 2.0, (self.height - 1) / 2.0

    @property
    def marker_count(self) -> int:
        return self.rows * self.cols

    def marker_positions(self) -> np.ndarray:
        """Rest positions (N, 2) in row-major order, i.e. sorted by (y, x)."""
        cx, cy = self.center_px
        rows, cols = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        x = cx + (cols.ravel() - (self.cols - 1) / 2.0) * self.pitch_px
        y = cy + (rows.ravel() - (self.rows - 1) / 2.0) * self.pitch_px
        return np.column_stack([x, y]).astype(np.float64)

    def mm_to_px(self, points_mm) -> np.ndarray:
        points = np.asarray(points_mm, dtype=np.float64).reshape(-1, 2)
        return points * self.px_per_mm + np.asarray(self.center_px)

    def sensing_roi(self) -> Roi:
        return Roi.full_frame(self.width, self.height, self.roi_border_px)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for name in ("background", "marker_color", "contact_color"):
            data[name] = list(data[name])
        return data

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "SensorModel":
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"Unknown sensor keys: {sorted(unknown)}")
        for name in ("background", "marker_color", "contact_color"):
            if name in data:
                data[name] = tuple(data[name])
        return cls(**data)


@dataclass(frozen=True)
class SlipPatch:
    """Axis-aligned rectangle of markers given an extra displacement (local slippage)."""

    center_mm: Tuple[float, float] = (0.0, 0.0)
    half_extents_mm: Tuple[float, float] = (1.0, 1.0)
    offset_px: Tuple[float, float] = (5.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "center_mm", tuple(float(v) for v in self.center_mm))
        object.__setattr__(self, "half_extents_mm", tuple(float(v) for v in self.half_extents_mm))
        object.__setattr__(self, "offset_px", tuple(float(v) for v in self.offset_px))
        if min(self.half_extents_mm) <= 0:
            raise SpecError(f"Slip patch half extents must be positive, got {self.half_extents_mm}")

    def contains(self, model: SensorModel, points_px: np.ndarray) -> np.ndarray:
        center = model.mm_to_px(self.center_mm)[0]
        half = np.asarray(self.half_extents_mm) * model.px_per_mm
        delta = np.abs(np.asarray(points_px, dtype=np.float64).reshape(-1, 2) - center)
        return np.all(delta <= half, axis=1)

    def to_dict(self) -> Dict[str, Any]:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SlipPatch":
        try:
            return cls(**{k: tuple(v) for k, v in data.items()})
        except TypeError as e:
            raise SpecError(f"Invalid slip patch: {e}")


@dataclass(frozen=True)
class SceneSpec:
    """
    One contact situation.

    size_mm is the circle radius, hexagon circumradius, rectangle half width
    (half height = size_mm * aspect) or cross arm half length (arm half width
    size_mm / 3). Polygons use vertices_mm relative to center_mm.
    """

    shape: str = "none"
    center_mm: Tuple[float, float] = (0.0, 0.0)
    size_mm: float = 4.0
    aspect: float = 1.0
    rotation_deg: float = 0.0
    vertices_mm: Optional[Tuple[Tuple[float, float], ...]] = None
    depth_mm: float = 0.5
    shear_mm: Tuple[float, float] = (0.0, 0.0)
    twist_deg: float = 0.0
    uniform_shift_mm: Tuple[float, float] = (0.0, 0.0)
    slip_patch: Optional[SlipPatch] = None
    hidden_markers: Tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "center_mm", tuple(float(v) for v in self.center_mm))
        object.__setattr__(self, "shear_mm", tuple(float(v) for v in self.shear_mm))
        object.__setattr__(self, "uniform_shift_mm", tuple(float(v) for v in self.uniform_shift_mm))
        object.__setattr__(self, "hidden_markers", tuple(int(i) for i in self.hidden_markers))
        if self.vertices_mm is not None:
            object.__setattr__(self, "vertices_mm", tuple(tuple(float(v) for v in p) for p in self.vertices_mm))
        if isinstance(self.slip_patch, dict):
            object.__setattr__(self, "slip_patch", SlipPatch.from_dict(self.slip_patch))

        if self.shape not in SHAPES:
            raise SpecError(f"Unknown contact shape '{self.shape}'", {"allowed": list(SHAPES)})
        if self.shape in ("circle", "rectangle", "hexagon", "cross") and self.size_mm <= 0:
            raise SpecError(f"Shape size must be positive, got {self.size_mm}")
        if self.shape == "rectangle" and self.aspect <= 0:
            raise SpecError(f"Rectangle aspect must be positive, got {self.aspect}")
        if self.shape == "polygon" and (self.vertices_mm is None or len(self.vertices_mm) < 3):
            raise SpecError("Polygon contact needs at least three vertices")
        if not all(math.isfinite(v) for v in (*self.center_mm, *self.shear_mm, self.depth_mm, self.twist_deg)):
            raise SpecError("Scene values must be finite")
        if self.depth_mm < 0:
            raise SpecError(f"Indent depth must be >= 0, got {self.depth_mm}")

    @property
    def has_contact(self) -> bool:
        return self.shape != "none"

    def with_seed(self, seed: int) -> "SceneSpec":
        return replace(self, seed=seed)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["center_mm"] = list(self.center_mm)
        data["shear_mm"] = list(self.shear_mm)
        data["uniform_shift_mm"] = list(self.uniform_shift_mm)
        data["hidden_markers"] = list(self.hidden_markers)
        data["vertices_mm"] = [list(p) for p in self.vertices_mm] if self.vertices_mm is not None else None
        data["slip_patch"] = self.slip_patch.to_dict() if self.slip_patch is not None else None
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SceneSpec":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"Unknown scene keys: {sorted(unknown)}")
        if data.get("slip_patch") is not None:
            data["slip_patch"] = SlipPatch.from_dict(data["slip_patch"])
        try:
            return cls(**data)
        except TypeError as e:
            raise SpecError(f"Invalid scene: {e}")


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Exact labels for one rendered frame."""

    mask: BinaryMask
    marker_positions: np.ndarray
    displacements: np.ndarray
    visible: np.ndarray
    in_contact: np.ndarray
    slip: bool = False
    area_fraction: float = 0.0

    def to_dict(self, decimals: int = 4) -> Dict[str, Any]:
        return {
            "area_pct": round(self.area_fraction, decimals),
            "slip": self.slip,
            "markers": [
                {
                    "x": round(float(p[0]), decimals),
                    "y": round(float(p[1]), decimals),
                    "dx": round(float(d[0]), decimals),
                    "dy": round(float(d[1]), decimals),
                    "visible": bool(v),
                    "in_contact": bool(c),
                }
                for p, d, v, c in zip(self.marker_positions, self.displacements, self.visible, self.in_contact)
            ],
        }


# ===== Contact geometry =====

class ContactRegion:
    """Contact geometry in pixels: analytic circle, polygon, full frame or nothing."""

    def __init__(self, model: SensorModel, scene: SceneSpec):
        self.model = model
        self.scene = scene
        self.kind = scene.shape
        self.center = model.mm_to_px(scene.center_mm)[0] if scene.shape != "full" else np.asarray(model.center_px)
        self.radius = scene.size_mm * model.px_per_mm if scene.shape == "circle" else 0.0
        self.polygon = self._polygon() if scene.shape in ("rectangle", "hexagon", "cross", "polygon") else None
        self._check_within_sensing_area()

    def _polygon(self) -> np.ndarray:
        scene = self.scene
        s = scene.size_mm
        if scene.shape == "rectangle":
            h = s * scene.aspect
            local = [(-s, -h), (s, -h), (s, h), (-s, h)]
        elif scene.shape == "hexagon":
            local = [(s * math.cos(math.pi / 3 * k), s * math.sin(math.pi / 3 * k)) for k in range(6)]
        elif scene.shape == "cross":
            w = s / 3.0
            local = [(-w, -s), (w, -s), (w, -w), (s, -w), (s, w), (w, w),
                     (w, s), (-w, s), (-w, w), (-s, w), (-s, -w), (-w, -w)]
        else:
            local = list(scene.vertices_mm)

        theta = math.radians(scene.rotation_deg)
        c, si = math.cos(theta), math.sin(theta)
        rotated = [(x * c - y * si, x * si + y * c) for x, y in local]
        return np.asarray(rotated, dtype=np.float64) * self.model.px_per_mm + self.center

    def _check_within_sensing_area(self) -> None:
        if self.kind in ("none", "full"):
            return
        roi = self.model.sensing_roi()
        lo = np.array([roi.x - 0.5, roi.y - 0.5])
        hi = np.array([roi.x + roi.width - 0.5, roi.y + roi.height - 0.5])
        if self.kind == "circle":
            extent_lo, extent_hi = self.center - self.radius, self.center + self.radius
        else:
            extent_lo, extent_hi = self.polygon.min(axis=0), self.polygon.max(axis=0)
        if np.any(extent_lo < lo) or np.any(extent_hi > hi):
            raise SpecError(
                f"Contact shape '{self.kind}' at {self.scene.center_mm} mm leaves the sensing area",
                {"shape": self.kind, "size_mm": self.scene.size_mm},
            )

    def signed_distance(self, points_px) -> np.ndarray:
        """Distance to the boundary, positive inside."""
        points = np.asarray(points_px, dtype=np.float64).reshape(-1, 2)
        if self.kind == "none":
            return np.full(len(points), -np.inf)
        if self.kind == "full":
            return np.full(len(points), np.inf)
        if self.kind == "circle":
            return self.radius - np.hypot(points[:, 0] - self.center[0], points[:, 1] - self.center[1])
        contour = self.polygon.reshape(-1, 1, 2).astype(np.float32)
        return np.array([cv2.pointPolygonTest(contour, (float(x), float(y)), True) for x, y in points])

    def coverage(self, supersample: int) -> np.ndarray:
        """Fraction of each pixel covered by the contact region, (height, width) float64."""
        w, h = self.model.width, self.model.height
        if self.kind == "none":
            return np.zeros((h, w))
        if self.kind == "full":
            return np.ones((h, w))

        s = supersample
        if self.kind == "circle":
            sub = (np.arange(w * s) + 0.5) / s - 0.5
            sub_y = (np.arange(h * s) + 0.5) / s - 0.5
            inside = ((sub[None, :] - self.center[0]) ** 2 + (sub_y[:, None] - self.center[1]) ** 2
                      <= self.radius ** 2)
        else:
            shift = 8
            scaled = np.rint(((self.polygon + 0.5) * s - 0.5) * (1 << shift)).astype(np.int32)
            canvas = np.zeros((h * s, w * s), dtype=np.uint8)
            cv2.fillPoly(canvas, [scaled.reshape(-1, 1, 2)], 1, lineType=cv2.LINE_8, shift=shift)
            inside = canvas > 0
        return inside.reshape(h, s, w, s).mean(axis=(1, 3))


def tint_alpha(depth_mm: float) -> float:
    """Contact tint strength: 0.3 at 0.1 mm rising linearly to 0.8 at 1.0 mm."""
    lo, hi = DEPTH_RANGE_MM
    t = min(max((depth_mm - lo) / (hi - lo), 0.0), 1.0)
    return 0.3 + 0.5 * t


def deformation_vectors(model: SensorModel, scene: SceneSpec, points_px, region: Optional[ContactRegion] = None) -> np.ndarray:
    """
    Membrane displacement (dx, dy) in pixels at each point.

    In-contact points move rigidly with the object (shear plus twist about the contact
    centre); outside, that motion decays as exp(-d^2 / 2 sigma^2) with the distance d to
    the contact boundary. The uniform shift and slip patch offset add on top.
    """
    points = np.asarray(points_px, dtype=np.float64).reshape(-1, 2)
    region = region or ContactRegion(model, scene)
    vectors = np.zeros_like(points)

    if region.kind != "none":
        distance = np.maximum(-region.signed_distance(points), 0.0)
        attenuation = np.exp(-(distance ** 2) / (2.0 * model.attenuation_sigma_px ** 2))

        motion = np.tile(np.asarray(scene.shear_mm) * model.px_per_mm, (len(points), 1))
        if scene.twist_deg:
            theta = math.radians(scene.twist_deg)
            rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
            rel = points - region.center
            motion = motion + rel @ rot.T - rel
        vectors += motion * attenuation[:, None]

    vectors += np.asarray(scene.uniform_shift_mm) * model.px_per_mm
    if scene.slip_patch is not None:
        inside = scene.slip_patch.contains(model, points)
        vectors[inside] += np.asarray(scene.slip_patch.offset_px)
    return vectors


def deformation_field(model: SensorModel, scene: SceneSpec, point: Sequence[float]) -> Tuple[float, float]:
    """Displacement at a single image point, in pixels."""
    x, y = float(point[0]), float(point[1])
    if not (-0.5 <= x <= model.width - 0.5 and -0.5 <= y <= model.height - 0.5):
        raise SpecError(f"Point ({x}, {y}) lies outside the {model.width}x{model.height} image")
    dx, dy = deformation_vectors(model, scene, [(x, y)])[0]
    return float(dx), float(dy)


def slip_ground_truth(model: SensorModel, scene: SceneSpec, in_contact: np.ndarray, visible: np.ndarray,
                      residual_px: float = DEFAULT_SLIP_RESIDUAL_PX,
                      count_threshold: int = DEFAULT_SLIP_COUNT_THRESHOLD) -> bool:
    """True when more than count_threshold visible in-contact markers carry a patch offset above residual_px."""
    if scene.slip_patch is None or math.hypot(*scene.slip_patch.offset_px) <= residual_px:
        return False
    in_patch = scene.slip_patch.contains(model, model.marker_positions())
    return int(np.count_nonzero(in_patch & in_contact & visible)) > count_threshold
