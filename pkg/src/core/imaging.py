"""
Low-level image operations for the marker pipeline.

Thresholding of the red marker dye, disk-element morphology and connected-component
blob detection producing sub-pixel marker centroids. All functions are pure.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import cv2
import numpy as np

from src.config import DEFAULT_FRAME_HEIGHT, DEFAULT_FRAME_WIDTH
from src.utils.error_handling import ConfigurationError, InputError

# Set up logging
logger = logging.getLogger(__name__)


# ===== Domain types =====

@dataclass(frozen=True, eq=False)
class Frame:
    """One RGB sensor image. `data` is a (height, width, 3) uint8 array."""

    data: np.ndarray
    index: int = 0
    timestamp: Optional[float] = None

    def __post_init__(self):
        data = self.data
        if not isinstance(data, np.ndarray) or data.ndim != 3 or data.shape[2] != 3:
            shape = getattr(data, "shape", None)
            raise InputError(f"Frame data must be a (height, width, 3) array, got {shape}")
        if data.dtype != np.uint8:
            raise InputError(f"Frame data must be uint8, got {data.dtype}")
        if data.shape[0] <= 0 or data.shape[1] <= 0:
            raise InputError(f"Frame dimensions must be positive, got {data.shape[:2]}")

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def channels(self) -> int:
        return 3

    @classmethod
    def from_bytes(cls, buffer: bytes, width: int = DEFAULT_FRAME_WIDTH, height: int = DEFAULT_FRAME_HEIGHT,
                   index: int = 0, timestamp: Optional[float] = None) -> "Frame":
        """Build a frame from a row-major RGB24 buffer."""
        expected = width * height * 3
        if len(buffer) != expected:
            raise InputError(f"Raw frame has {len(buffer)} bytes, expected {expected} for {width}x{height} RGB")
        data = np.frombuffer(buffer, dtype=np.uint8).reshape(height, width, 3).copy()
        return cls(data=data, index=index, timestamp=timestamp)

    def with_index(self, index: int, timestamp: Optional[float] = None) -> "Frame":
        return Frame(data=self.data, index=index, timestamp=timestamp if timestamp is not None else self.timestamp)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """A per-pixel boolean mask with the dimensions of its source frame."""

    bits: np.ndarray

    def __post_init__(self):
        if not isinstance(self.bits, np.ndarray) or self.bits.ndim != 2:
            raise InputError("BinaryMask bits must be a 2D array")
        if self.bits.dtype != np.bool_:
            object.__setattr__(self, "bits", np.ascontiguousarray(self.bits != 0))

    @classmethod
    def empty(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def is_empty(self) -> bool:
        return not self.bits.any()

    def as_uint8(self, on_value: int = 1) -> np.ndarray:
        """Contiguous uint8 copy with `on_value` for set pixels (OpenCV input)."""
        return np.ascontiguousarray(self.bits, dtype=np.uint8) * np.uint8(on_value)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    __hash__ = None


@dataclass(frozen=True)
class Roi:
    """Axis-aligned region of interest in pixel coordinates."""

    x: int
    y: int
    width: int
    height: int

    @classmethod
    def full_frame(cls, width: int, height: int, border: int = 0) -> "Roi":
        """The whole frame minus a constant border."""
        if border < 0 or 2 * border >= min(width, height):
            raise ConfigurationError(f"ROI border {border} does not fit a {width}x{height} frame")
        return cls(border, border, width - 2 * border, height - 2 * border)

    @property
    def area(self) -> int:
        return max(self.width, 0) * max(self.height, 0)

    def fits(self, width: int, height: int) -> bool:
        return (self.x >= 0 and self.y >= 0 and self.width > 0 and self.height > 0
                and self.x + self.width <= width and self.y + self.height <= height)

    def slices(self) -> Tuple[slice, slice]:
        return slice(self.y, self.y + self.height), slice(self.x, self.x + self.width)

    def to_list(self) -> list:
        return [self.x, self.y, self.width, self.height]


@dataclass(frozen=True, eq=False)
class MarkerSet:
    """
    Detected marker centroids, sorted lexicographically by (y, x).

    `centroids` is an (N, 2) float array of (x, y); `areas` holds pixel counts.
    """

    centroids: np.ndarray
    areas: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        centroids = np.asarray(self.centroids, dtype=np.float64).reshape(-1, 2)
        areas = np.asarray(self.areas, dtype=np.int64).reshape(-1)
        if len(centroids) != len(areas):
            raise InputError(f"MarkerSet has {len(centroids)} centroids but {len(areas)} areas")
        object.__setattr__(self, "centroids", centroids)
        object.__setattr__(self, "areas", areas)

    def __len__(self) -> int:
        return len(self.centroids)

    @classmethod
    def from_points(cls, points, frame_index: int = 0, area: int = 1) -> "MarkerSet":
        """Sorted MarkerSet from raw (x, y) points; used for synthetic inputs."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        order = np.lexsort((points[:, 0], points[:, 1]))
        return cls(points[order], np.full(len(points), area, dtype=np.int64), frame_index)

    def subset(self, indices) -> "MarkerSet":
        indices = np.asarray(indices, dtype=np.int64)
        return MarkerSet(self.centroids[indices], self.areas[indices], self.frame_index)


# ===== Configuration =====

@dataclass(frozen=True)
class ThresholdConfig:
    """Red-marker rule: marker where R - max(G, B) > t_red. Optional ROI restricts output."""

    t_red: int = 40
    roi: Optional[Tuple[int, int, int, int]] = None

    def __post_init__(self):
        if not 0 <= self.t_red < 255:
            raise ConfigurationError(f"t_red must be in [0, 255), got {self.t_red}")
        if self.roi is not None and len(self.roi) != 4:
            raise ConfigurationError(f"threshold ROI must be [x, y, width, height], got {self.roi}")


@dataclass(frozen=True)
class BlobConfig:
    """Blob area filter and the cleaning morphology applied before detection."""

    min_area: int = 8
    max_area: int = 500
    open_radius: int = 2
    close_radius: int = 2

    def __post_init__(self):
        if self.min_area < 1 or self.max_area < self.min_area:
            raise ConfigurationError(f"Invalid blob area bounds [{self.min_area}, {self.max_area}]")
        if self.open_radius < 0 or self.close_radius < 0:
            raise ConfigurationError("Blob morphology radii must be >= 0")


# ===== Operations =====

def threshold(frame: Frame, cfg: ThresholdConfig = ThresholdConfig()) -> BinaryMask:
    """
    Classify marker pixels with the red-dye rule.

    Args:
        frame: Input RGB frame
        cfg: Threshold configuration

    Returns:
        Mask of pixels where R - max(G, B) > cfg.t_red

    Raises:
        ConfigurationError: If the configured ROI does not fit the frame
    """
    rgb = frame.data.astype(np.int16)
    score = rgb[..., 0] - np.maximum(rgb[..., 1], rgb[..., 2])
    bits = score > cfg.t_red

    if cfg.roi is not None:
        roi = Roi(*cfg.roi)
        if not roi.fits(frame.width, frame.height):
            raise ConfigurationError(
                f"Threshold ROI {cfg.roi} does not fit a {frame.width}x{frame.height} frame",
                {"roi": list(cfg.roi), "frame": [frame.width, frame.height]},
            )
        restricted = np.zeros_like(bits)
        rows, cols = roi.slices()
        restricted[rows, cols] = bits[rows, cols]
        bits = restricted

    return BinaryMask(bits)


@lru_cache(maxsize=32)
def _disk(radius: int) -> np.ndarray:
    return cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (2 * radius + 1, 2 * radius + 1))


_MORPH_OPS = {
    "erode": cv2.MORPH_ERODE,
    "dilate": cv2.MORPH_DILATE,
    "open": cv2.MORPH_OPEN,
    "close": cv2.MORPH_CLOSE,
}


def morphology(mask: BinaryMask, op: str, radius: int) -> BinaryMask:
    """
    Apply a morphological operation with a disk structuring element.

    Args:
        mask: Input mask
        op: One of "erode", "dilate", "open", "close"
        radius: Disk radius in pixels (>= 1)

    Returns:
        The transformed mask

    Raises:
        ConfigurationError: For an unknown op or a radius outside [1, min(width, height) / 2)
    """
    if op not in _MORPH_OPS:
        raise ConfigurationError(f"Unknown morphology op '{op}'", {"allowed": sorted(_MORPH_OPS)})
    if radius < 1 or radius >= min(mask.width, mask.height) / 2:
        raise ConfigurationError(
            f"Morphology radius {radius} invalid for a {mask.width}x{mask.height} mask",
            {"radius": radius},
        )
    if mask.is_empty():
        return BinaryMask.empty(mask.width, mask.height)

    result = cv2.morphologyEx(mask.as_uint8(), _MORPH_OPS[op], _disk(int(radius)))
    return BinaryMask(result > 0)


def detect_blobs(mask: BinaryMask, cfg: BlobConfig = BlobConfig(), frame_index: int = 0) -> MarkerSet:
    """
    One unweighted sub-pixel centroid per 8-connected component within the area bounds.

    Args:
        mask: Cleaned marker mask
        cfg: Blob area bounds
        frame_index: Index recorded on the returned MarkerSet

    Returns:
        MarkerSet sorted by (y, x); empty when nothing qualifies
    """
    if mask.is_empty():
        return MarkerSet(np.empty((0, 2)), np.empty(0, dtype=np.int64), frame_index)

    count, _, stats, centroids = cv2.connectedComponentsWithStats(mask.as_uint8(), connectivity=8, ltype=cv2.CV_32S)
    areas = stats[1:count, cv2.CC_STAT_AREA].astype(np.int64)
    points = centroids[1:count].astype(np.float64)

    keep = (areas >= cfg.min_area) & (areas <= cfg.max_area)
    if not keep.all():
        logger.debug(f"Frame {frame_index}: {int((~keep).sum())} blobs rejected by area filter")
    areas, points = areas[keep], points[keep]

    order = np.lexsort((points[:, 0], points[:, 1]))
    return MarkerSet(points[order], areas[order], frame_index)


def clean_marker_mask(mask: BinaryMask, cfg: BlobConfig = BlobConfig()) -> BinaryMask:
    """Open (remove speckle) then close (fill dot interiors)."""
    if cfg.open_radius >= 1:
        mask = morphology(mask, "open", cfg.open_radius)
    if cfg.close_radius >= 1:
        mask = morphology(mask, "close", cfg.close_radius)
    return mask


def extract_markers(frame: Frame, threshold_cfg: ThresholdConfig = ThresholdConfig(),
                    blob_cfg: BlobConfig = BlobConfig()) -> MarkerSet:
    """Blob detection on the cleaned threshold mask of a frame."""
    mask = clean_marker_mask(threshold(frame, threshold_cfg), blob_cfg)
    return detect_blobs(mask, blob_cfg, frame_index=frame.index)
