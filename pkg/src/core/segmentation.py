"""
Contact-area segmentation.

Two interchangeable segmenters produce a ContactMask per frame:
- heuristic: morphology-cleaned difference against the no-contact reference
- external: a learned model running out of process (see services.segmentation_service)

The Segmenter wrapper selects one by config and degrades to the heuristic when the
external model is unavailable and fallback is enabled.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from src.config import DEFAULT_ROI_BORDER_PX
from src.core.imaging import BinaryMask, Frame, Roi, ThresholdConfig, morphology, threshold
from src.utils.error_handling import ConfigurationError, InputError, SegmentationUnavailableError

# Set up logging
logger = logging.getLogger(__name__)

SEGMENTER_KINDS = ("heuristic", "external")
EXTERNAL_MODES = ("file", "stream")


# ===== Domain types =====

@dataclass(frozen=True, eq=False)
class ContactMask:
    """
    Contact region C_i of one frame.

    `contours` are closed (K, 2) int32 polygons of (x, y) pixel centres as traced by
    OpenCV; `parents[k]` is the index of the outer contour enclosing hole k, or -1
    for an outer contour.
    """

    mask: BinaryMask
    contours: List[np.ndarray] = field(default_factory=list)
    parents: List[int] = field(default_factory=list)
    area_fraction: float = 0.0

    @classmethod
    def empty(cls, width: int, height: int) -> "ContactMask":
        return cls(BinaryMask.empty(width, height))

    @property
    def holes(self) -> List[bool]:
        return [p != -1 for p in self.parents]

    @property
    def outer_contours(self) -> List[np.ndarray]:
        return [c for c, hole in zip(self.contours, self.holes) if not hole]

    @property
    def hole_contours(self) -> List[np.ndarray]:
        return [c for c, hole in zip(self.contours, self.holes) if hole]

    def is_empty(self) -> bool:
        return self.mask.is_empty()

    def contours_to_list(self) -> List[List[List[int]]]:
        """Outer contours as nested [x, y] lists for JSON output."""
        return [c.reshape(-1, 2).tolist() for c in self.outer_contours]


@dataclass(frozen=True)
class HeuristicParams:
    """Frame-differencing segmenter settings (pixels / 8-bit intensity units)."""

    diff_threshold: int = 10
    blur_radius: int = 2
    close_radius: int = 8
    open_radius: int = 2
    min_region_area: int = 150
    marker_margin: int = 2
    t_red: int = 40

    def __post_init__(self):
        if not 0 <= self.diff_threshold < 255:
            raise ConfigurationError(f"segmenter.heuristic.diff_threshold must be in [0, 255), got {self.diff_threshold}")
        for name in ("blur_radius", "close_radius", "open_radius", "min_region_area", "marker_margin"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"segmenter.heuristic.{name} must be >= 0")


@dataclass(frozen=True)
class ExternalParams:
    """
    Out-of-process segmenter exchange.

    mode "file" writes req_<index>.png into exchange_dir and polls for resp_<index>.png;
    mode "stream" talks length-prefixed PNG over the stdin/stdout of `command`.
    """

    mode: str = "file"
    exchange_dir: Optional[str] = None
    command: Optional[Tuple[str, ...]] = None
    timeout_ms: float = 100.0
    poll_interval_ms: float = 2.0

    def __post_init__(self):
        if self.mode not in EXTERNAL_MODES:
            raise ConfigurationError(f"segmenter.external.mode must be one of {EXTERNAL_MODES}, got '{self.mode}'")
        if self.timeout_ms <= 0:
            raise ConfigurationError(f"segmenter.external.timeout_ms must be > 0, got {self.timeout_ms}")
        if self.command is not None:
            object.__setattr__(self, "command", tuple(str(part) for part in self.command))


@dataclass(frozen=True)
class SegmenterConfig:
    """Exactly one segmenter kind is active; `fallback` degrades external to heuristic."""

    kind: str = "heuristic"
    heuristic: HeuristicParams = HeuristicParams()
    external: ExternalParams = ExternalParams()
    fallback: bool = True

    def __post_init__(self):
        if self.kind not in SEGMENTER_KINDS:
            raise ConfigurationError(f"segmenter.kind must be one of {SEGMENTER_KINDS}, got '{self.kind}'")
        if self.kind == "external":
            ext = self.external
            if ext.mode == "file" and not ext.exchange_dir:
                raise ConfigurationError("segmenter.external.exchange_dir is required in file mode")
            if ext.mode == "stream" and not ext.command:
                raise ConfigurationError("segmenter.external.command is required in stream mode")


# ===== Mask / contour helpers =====

def _default_roi(width: int, height: int) -> Roi:
    return Roi.full_frame(width, height, DEFAULT_ROI_BORDER_PX)


def area_fraction(mask: BinaryMask, roi: Roi) -> float:
    """
    Percentage of ROI pixels set in the mask.

    Raises:
        InputError: If the ROI is empty or does not lie within the mask
    """
    if roi.area == 0:
        raise InputError(f"Sensing ROI {roi.to_list()} is empty")
    if not roi.fits(mask.width, mask.height):
        raise InputError(f"Sensing ROI {roi.to_list()} exceeds the {mask.width}x{mask.height} frame")
    rows, cols = roi.slices()
    return 100.0 * float(np.count_nonzero(mask.bits[rows, cols])) / float(roi.area)


def remove_small_regions(mask: BinaryMask, min_area: int) -> BinaryMask:
    """Drop 8-connected regions smaller than min_area pixels."""
    if min_area <= 1 or mask.is_empty():
        return mask
    count, labels, stats, _ = cv2.connectedComponentsWithStats(mask.as_uint8(), connectivity=8, ltype=cv2.CV_32S)
    keep = stats[:, cv2.CC_STAT_AREA] >= min_area
    keep[0] = False
    return BinaryMask(keep[labels])


def trace_contours(mask: BinaryMask) -> Tuple[List[np.ndarray], List[int]]:
    """
    Outer and hole boundaries of every connected component (two-level hierarchy).

    Returns:
        (contours, parents) with parents[k] == -1 for outer contours
    """
    if mask.is_empty():
        return [], []
    contours, hierarchy = cv2.findContours(mask.as_uint8(), cv2.RETR_CCOMP, cv2.CHAIN_APPROX_SIMPLE)
    if hierarchy is None:
        return [], []
    polygons = [np.asarray(c, dtype=np.int32).reshape(-1, 2) for c in contours]
    parents = [int(h[3]) for h in hierarchy[0]]
    return polygons, parents


def rasterize_contours(contours: Sequence[np.ndarray], parents: Sequence[int], width: int, height: int) -> BinaryMask:
    """
    Rebuild a mask from traced contours.

    Components are painted largest first; each hole is cleared and its border pixels,
    which belong to the component, are redrawn.
    """
    canvas = np.zeros((height, width), dtype=np.uint8)
    if not contours:
        return BinaryMask(canvas)

    children: Dict[int, List[int]] = {}
    for i, parent in enumerate(parents):
        if parent != -1:
            children.setdefault(parent, []).append(i)

    shapes = [c.reshape(-1, 1, 2).astype(np.int32) for c in contours]
    outers = sorted((i for i, p in enumerate(parents) if p == -1),
                    key=lambda i: (-abs(cv2.contourArea(shapes[i])), i))
    for i in outers:
        cv2.drawContours(canvas, shapes, i, 1, thickness=cv2.FILLED, lineType=cv2.LINE_8)
        for h in children.get(i, []):
            cv2.drawContours(canvas, shapes, h, 0, thickness=cv2.FILLED, lineType=cv2.LINE_8)
            cv2.drawContours(canvas, shapes, h, 1, thickness=1, lineType=cv2.LINE_8)
        cv2.drawContours(canvas, shapes, i, 1, thickness=1, lineType=cv2.LINE_8)
    return BinaryMask(canvas)


def contact_mask_from_bits(bits: np.ndarray, roi: Optional[Roi] = None) -> ContactMask:
    """Restrict a raw mask to the ROI and attach contours and area fraction."""
    mask = BinaryMask(np.asarray(bits))
    roi = roi or _default_roi(mask.width, mask.height)
    if not roi.fits(mask.width, mask.height):
        raise InputError(f"Sensing ROI {roi.to_list()} exceeds the {mask.width}x{mask.height} frame")

    restricted = np.zeros_like(mask.bits)
    rows, cols = roi.slices()
    restricted[rows, cols] = mask.bits[rows, cols]
    mask = BinaryMask(restricted)

    contours, parents = trace_contours(mask)
    return ContactMask(mask=mask, contours=contours, parents=parents, area_fraction=area_fraction(mask, roi))


# ===== Segmenters =====

def _marker_exclusion(frame: Frame, reference: Frame, params: HeuristicParams) -> np.ndarray:
    t_cfg = ThresholdConfig(t_red=params.t_red)
    markers = threshold(frame, t_cfg).bits | threshold(reference, t_cfg).bits
    mask = BinaryMask(markers)
    if params.marker_margin >= 1 and not mask.is_empty():
        mask = morphology(mask, "dilate", params.marker_margin)
    return mask.bits


def segment_heuristic(frame: Frame, reference: Frame, params: HeuristicParams = HeuristicParams(),
                      roi: Optional[Roi] = None) -> ContactMask:
    """
    Segment contact by differencing against the no-contact reference.

    Marker pixels of either image are excluded from the difference and the gaps
    are closed over afterwards.

    Args:
        frame: Current frame
        reference: No-contact reference frame of the same size
        params: Heuristic settings
        roi: Sensing ROI (default: frame minus a 10 px border)

    Returns:
        ContactMask restricted to the ROI

    Raises:
        InputError: On a dimension mismatch
    """
    if frame.data.shape != reference.data.shape:
        raise InputError(
            f"Frame {frame.index} is {frame.width}x{frame.height}, reference is {reference.width}x{reference.height}",
            {"frame": frame.index},
        )

    diff = cv2.absdiff(frame.data, reference.data).max(axis=2)
    diff[_marker_exclusion(frame, reference, params)] = 0
    if params.blur_radius >= 1:
        size = 2 * params.blur_radius + 1
        diff = cv2.GaussianBlur(diff, (size, size), 0)

    mask = BinaryMask(diff > params.diff_threshold)
    if not mask.is_empty():
        if params.close_radius >= 1:
            mask = morphology(mask, "close", params.close_radius)
        if params.open_radius >= 1:
            mask = morphology(mask, "open", params.open_radius)
        mask = remove_small_regions(mask, params.min_region_area)

    return contact_mask_from_bits(mask.bits, roi or _default_roi(frame.width, frame.height))


def segment_external(frame: Frame, cfg: SegmenterConfig, client=None, roi: Optional[Roi] = None) -> ContactMask:
    """
    Segment a frame with the out-of-process model.

    Args:
        frame: Current frame
        cfg: Segmenter config carrying the external exchange settings
        client: Open ExternalSegmenter to reuse; a temporary one is opened otherwise
        roi: Sensing ROI

    Returns:
        ContactMask from the returned 8-bit mask thresholded at 128

    Raises:
        SegmentationUnavailableError: On timeout or a dead model process
        InputError: If the returned mask does not match the frame size
    """
    from src.services.segmentation_service import ExternalSegmenter

    if client is None:
        with ExternalSegmenter(cfg.external) as temporary:
            response = temporary.request(frame)
    else:
        response = client.request(frame)

    if response.shape[:2] != (frame.height, frame.width):
        raise InputError(
            f"External mask is {response.shape[1]}x{response.shape[0]}, frame is {frame.width}x{frame.height}",
            {"frame": frame.index},
        )
    if response.ndim == 3:
        response = response.max(axis=2)
    return contact_mask_from_bits(response >= 128, roi or _default_roi(frame.width, frame.height))


class Segmenter:
    """
    Config-selected segmenter for a frame stream.

    Holds at most one external client; not to be shared across concurrent frames
    when the external kind is active.
    """

    def __init__(self, cfg: SegmenterConfig = SegmenterConfig(), roi: Optional[Roi] = None):
        self.cfg = cfg
        self.roi = roi
        self._client = None
        self.degraded_count = 0

    @property
    def is_external(self) -> bool:
        return self.cfg.kind == "external"

    def _ensure_client(self):
        if self._client is None:
            from src.services.segmentation_service import ExternalSegmenter

            self._client = ExternalSegmenter(self.cfg.external)
            self._client.open()
        return self._client

    def segment(self, frame: Frame, reference: Frame) -> Tuple[ContactMask, List[str]]:
        """
        Returns:
            (ContactMask, flags); flags holds "segmenter_degraded" after a fallback
        """
        if not self.is_external:
            return segment_heuristic(frame, reference, self.cfg.heuristic, self.roi), []

        try:
            return segment_external(frame, self.cfg, self._ensure_client(), self.roi), []
        except SegmentationUnavailableError as e:
            if not self.cfg.fallback:
                raise
            self.degraded_count += 1
            logger.warning(f"Frame {frame.index}: external segmenter unavailable ({e.message}); using heuristic")
            return segment_heuristic(frame, reference, self.cfg.heuristic, self.roi), ["segmenter_degraded"]

    def close(self) -> None:
        if self._client is not None:
            self._client.close()
            self._client = None

    def __enter__(self) -> "Segmenter":
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        self.close()


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union; two empty masks score 1."""
    union = np.count_nonzero(a.bits | b.bits)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(a.bits & b.bits)) / float(union)


def segmenter_config_from_dict(data: Dict[str, Any]) -> SegmenterConfig:
    """Build a SegmenterConfig from the `segmenter` config section."""
    data = dict(data or {})
    allowed = {"kind", "heuristic", "external", "fallback"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigurationError(f"Unknown keys in [segmenter]: {sorted(unknown)}")
    try:
        heuristic = HeuristicParams(**data.pop("heuristic", {}))
        external_data = dict(data.pop("external", {}))
        if "command" in external_data and external_data["command"] is not None:
            command = external_data["command"]
            external_data["command"] = tuple(command.split() if isinstance(command, str) else command)
        external = ExternalParams(**external_data)
    except TypeError as e:
        raise ConfigurationError(f"Invalid [segmenter] section: {e}")
    return SegmenterConfig(heuristic=heuristic, external=external, **data)
