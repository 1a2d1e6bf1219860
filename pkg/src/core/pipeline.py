"""
Per-frame contact pipeline.

For every frame: contact segmentation, marker extraction, matching against the
no-contact reference markers and, when there is contact, shear estimation and
incipient slip detection. Module failures become report flags so a stream never stops.
"""

import logging
import sys
from dataclasses import asdict, dataclass, field
from itertools import chain, islice
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.config import (
    DEFAULT_FRAME_HEIGHT,
    DEFAULT_FRAME_WIDTH,
    DEFAULT_PX_PER_MM,
    DEFAULT_ROI_BORDER_PX,
    GRID_COLS,
    GRID_ROWS,
    SCHEMA_VERSION,
    load_config_document,
)
from src.core.imaging import BlobConfig, Frame, MarkerSet, Roi, ThresholdConfig, extract_markers
from src.core.segmentation import ContactMask, Segmenter, SegmenterConfig, segment_heuristic, segmenter_config_from_dict
from src.core.shear import ShearCalibration, ShearEstimate, estimate_shear
from src.core.slip import SlipConfig, SlipReport, evaluate_slip
from src.core.tracking import DisplacementField, MatchConfig, match_markers
from src.utils.error_handling import ApplicationError, ConfigurationError, ErrorHandler, InitializationError, InputError
from src.utils.export_utils import JsonLinesWriter, annotate_frame
from src.utils.frame_io import save_frame
from src.utils.performance_monitor import PerformanceMonitor, StageTimer
from src.utils.thread_pool import map_ordered

# Set up logging
logger = logging.getLogger(__name__)


# ===== Configuration =====

@dataclass(frozen=True)
class SensorConfig:
    width: int = DEFAULT_FRAME_WIDTH
    height: int = DEFAULT_FRAME_HEIGHT
    px_per_mm: float = DEFAULT_PX_PER_MM
    roi_border_px: int = DEFAULT_ROI_BORDER_PX
    roi: Optional[Tuple[int, int, int, int]] = None
    expected_markers: int = GRID_ROWS * GRID_COLS

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or self.px_per_mm <= 0:
            raise ConfigurationError("sensor.width, sensor.height and sensor.px_per_mm must be positive")
        if self.roi is not None:
            object.__setattr__(self, "roi", tuple(int(v) for v in self.roi))
            if len(self.roi) != 4 or not Roi(*self.roi).fits(self.width, self.height):
                raise ConfigurationError(f"sensor.roi {list(self.roi)} does not fit a {self.width}x{self.height} frame")
        if self.expected_markers < 1:
            raise ConfigurationError("sensor.expected_markers must be >= 1")

    def sensing_roi(self) -> Roi:
        if self.roi is not None:
            return Roi(*self.roi)
        return Roi.full_frame(self.width, self.height, self.roi_border_px)


@dataclass(frozen=True)
class ReferenceConfig:
    """Reference source: average of the first N frames, or one explicit image file."""

    source: str = "first_n"
    first_n: int = 5
    path: Optional[str] = None
    min_marker_ratio: float = 0.9
    max_marker_ratio: float = 1.1

    def __post_init__(self):
        if self.source not in ("first_n", "file"):
            raise ConfigurationError(f"reference.source must be 'first_n' or 'file', got '{self.source}'")
        if self.first_n < 1:
            raise ConfigurationError(f"reference.first_n must be >= 1, got {self.first_n}")
        if self.source == "file" and not self.path:
            raise ConfigurationError("reference.path is required when reference.source is 'file'")


@dataclass(frozen=True)
class OutputConfig:
    stride: int = 1
    include_timing: bool = True
    include_field: bool = False
    deterministic: bool = True
    vector_scale: float = 3.0
    decimals: int = 4

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigurationError(f"output.stride must be >= 1, got {self.stride}")


_SECTIONS = {
    "sensor": SensorConfig,
    "threshold": ThresholdConfig,
    "blobs": BlobConfig,
    "matching": MatchConfig,
    "slip": SlipConfig,
    "reference": ReferenceConfig,
    "output": OutputConfig,
}


def _build_section(name: str, cls, data: Optional[Dict[str, Any]]):
    data = dict(data or {})
    unknown = set(data) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigurationError(f"Unknown keys in [{name}]: {sorted(unknown)}")
    for key, value in data.items():
        if isinstance(value, list):
            data[key] = tuple(value)
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigurationError(f"Invalid [{name}] section: {e}")


@dataclass(frozen=True)
class PipelineConfig:
    """Every module setting; every field has a default so an empty document is valid."""

    sensor: SensorConfig = SensorConfig()
    threshold: ThresholdConfig = ThresholdConfig()
    blobs: BlobConfig = BlobConfig()
    matching: MatchConfig = MatchConfig()
    calibration: ShearCalibration = ShearCalibration()
    segmenter: SegmenterConfig = SegmenterConfig()
    slip: SlipConfig = SlipConfig()
    reference: ReferenceConfig = ReferenceConfig()
    output: OutputConfig = OutputConfig()
    workers: int = 1

    @property
    def max_match_distance_px(self) -> float:
        return self.matching.to_pixels(self.sensor.px_per_mm)

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]], base_dir: Optional[Path] = None) -> "PipelineConfig":
        """
        Build a config from a parsed document.

        Raises:
            ConfigurationError: For unknown sections or keys, or invalid values
        """
        data = dict(data or {})
        allowed = set(_SECTIONS) | {"calibration", "segmenter", "workers"}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigurationError(f"Unknown config sections: {sorted(unknown)}")

        kwargs: Dict[str, Any] = {name: _build_section(name, cls_, data.get(name)) for name, cls_ in _SECTIONS.items()}
        kwargs["segmenter"] = segmenter_config_from_dict(data.get("segmenter"))

        calibration = dict(data.get("calibration") or {})
        if "path" in calibration:
            path = Path(calibration.pop("path"))
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            if calibration:
                raise ConfigurationError("[calibration] takes either 'path' or inline values, not both")
            kwargs["calibration"] = ShearCalibration.load(path)
        else:
            calibration.setdefault("px_per_mm", kwargs["sensor"].px_per_mm)
            kwargs["calibration"] = ShearCalibration.from_dict(calibration)

        workers = data.get("workers", 1)
        if not isinstance(workers, int) or workers < 1:
            raise ConfigurationError(f"workers must be a positive integer, got {workers!r}")
        kwargs["workers"] = workers
        return cls(**kwargs)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PipelineConfig":
        path = Path(path)
        return cls.from_dict(load_config_document(path), base_dir=path.parent)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {name: asdict(getattr(self, name)) for name in _SECTIONS}
        data["calibration"] = self.calibration.to_dict()
        segmenter = asdict(self.segmenter)
        if segmenter["external"]["command"] is not None:
            segmenter["external"]["command"] = list(segmenter["external"]["command"])
        data["segmenter"] = segmenter
        data["workers"] = self.workers
        for section in data.values():
            if isinstance(section, dict):
                for key, value in section.items():
                    if isinstance(value, tuple):
                        section[key] = list(value)
        return data

    def effective_workers(self) -> int:
        """External segmentation keeps one request in flight, so it runs single-threaded."""
        if self.segmenter.kind == "external":
            return 1
        return self.workers


# ===== Reports and state =====

@dataclass(eq=False)
class ContactReport:
    """Outputs of one frame: contact area and contours, shear, slip, timing and flags."""

    frame_index: int
    area_fraction: float = 0.0
    contact: Optional[ContactMask] = None
    shear: ShearEstimate = ShearEstimate()
    slip: SlipReport = SlipReport()
    timing: Dict[str, int] = field(default_factory=dict)
    flags: List[str] = field(default_factory=list)
    displacement: Optional[DisplacementField] = None
    markers: int = 0

    @property
    def contours(self) -> List[np.ndarray]:
        return self.contact.outer_contours if self.contact is not None else []


def report_to_json(report: ContactReport, output: OutputConfig = OutputConfig()) -> Dict[str, Any]:
    """JSON-lines record with a fixed key order."""
    record: Dict[str, Any] = {
        "v": SCHEMA_VERSION,
        "frame": report.frame_index,
        "area_pct": round(report.area_fraction, output.decimals),
        "contours": report.contact.contours_to_list() if report.contact is not None else [],
        "shear": report.shear.to_json(),
        "slip": report.slip.to_json(),
    }
    if output.include_timing:
        record["timing_us"] = {k: (0 if output.deterministic else v) for k, v in report.timing.items()}
    record["flags"] = list(report.flags)
    if output.include_field:
        record["field"] = report.displacement.to_json_array(output.decimals) if report.displacement is not None else []
    return record


@dataclass
class PipelineState:
    """Everything a frame needs besides itself; shared read-only across workers."""

    reference: Frame
    markers: MarkerSet
    segmenter: Segmenter
    errors: ErrorHandler = field(default_factory=ErrorHandler)
    monitor: PerformanceMonitor = field(default_factory=PerformanceMonitor)

    @classmethod
    def create(cls, reference: Frame, markers: MarkerSet, cfg: PipelineConfig) -> "PipelineState":
        return cls(reference=reference, markers=markers,
                   segmenter=Segmenter(cfg.segmenter, cfg.sensor.sensing_roi()))

    def close(self) -> None:
        self.segmenter.close()


# ===== Operations =====

def init_reference(frames: Sequence[Frame], cfg: PipelineConfig = PipelineConfig()) -> Tuple[Frame, MarkerSet]:
    """
    Build the no-contact reference from N frames.

    Args:
        frames: First N frames of the stream, all without contact
        cfg: Pipeline configuration

    Returns:
        (reference frame = per-pixel mean, reference markers b_0)

    Raises:
        InitializationError: No frames, too few or too many markers, or contact in a frame
        InputError: Frames of different sizes
    """
    frames = list(frames)
    if not frames:
        raise InitializationError("No frames available for the reference")
    shape = frames[0].data.shape
    for frame in frames[1:]:
        if frame.data.shape != shape:
            raise InputError(f"Reference frame {frame.index} is {frame.width}x{frame.height}, expected {shape[1]}x{shape[0]}")

    stack = np.stack([f.data.astype(np.float64) for f in frames])
    mean = np.clip(np.rint(stack.mean(axis=0)), 0, 255).astype(np.uint8)
    reference = Frame(data=mean, index=frames[0].index)
    markers = extract_markers(reference, cfg.threshold, cfg.blobs)

    expected = cfg.sensor.expected_markers
    low = cfg.reference.min_marker_ratio * expected
    high = cfg.reference.max_marker_ratio * expected
    if not low <= len(markers) <= high:
        raise InitializationError(
            f"Reference shows {len(markers)} markers, expected {expected} "
            f"(accepted {low:g}..{high:g}); is something touching the sensor?",
            {"markers": len(markers), "expected": expected},
        )

    if len(frames) >= 2:
        roi = cfg.sensor.sensing_roi()
        for frame in frames:
            area = segment_heuristic(frame, reference, cfg.segmenter.heuristic, roi).area_fraction
            if area > 0:
                raise InitializationError(
                    f"Reference frame {frame.index} shows contact ({area:.2f}% of the sensing area)",
                    {"frame": frame.index, "area_pct": area},
                )

    logger.info(f"Reference initialised from {len(frames)} frames: {len(markers)} markers")
    return reference, markers


def process_frame(frame: Frame, state: PipelineState, cfg: PipelineConfig = PipelineConfig()) -> ContactReport:
    """
    Run segmentation, marker extraction, matching and (with contact) shear and slip.

    Errors of individual stages are logged and recorded as `error:<Type>` flags; the
    report is always returned.
    """
    timer = StageTimer()
    report = ContactReport(frame_index=frame.index)
    flags: List[str] = []

    def fail(exc: Exception, stage: str) -> None:
        flags.append(state.errors.handle_exception(exc, frame_index=frame.index, context={"stage": stage}).as_flag())

    if frame.data.shape != state.reference.data.shape:
        fail(InputError(f"Frame is {frame.width}x{frame.height}, reference is "
                        f"{state.reference.width}x{state.reference.height}"), "input")
        timer.finish()
        report.flags = flags
        report.timing = timer.to_dict()
        return report

    contact = ContactMask.empty(frame.width, frame.height)
    try:
        with timer.stage("segmentation"):
            contact, seg_flags = state.segmenter.segment(frame, state.reference)
        flags.extend(seg_flags)
    except ApplicationError as e:
        fail(e, "segmentation")

    field_ = DisplacementField.empty(len(state.markers), 0)
    try:
        with timer.stage("markers"):
            markers = extract_markers(frame, cfg.threshold, cfg.blobs)
        report.markers = len(markers)
        with timer.stage("matching"):
            field_ = match_markers(state.markers, markers, cfg.max_match_distance_px)
    except ApplicationError as e:
        fail(e, "markers")

    shear = ShearEstimate.zero()
    slip = SlipReport()
    if contact.area_fraction > 0:
        try:
            with timer.stage("shear"):
                shear = estimate_shear(field_, cfg.calibration, len(state.markers))
            if shear.saturated:
                flags.append("shear_saturated")
        except ApplicationError as e:
            fail(e, "shear")
        try:
            with timer.stage("slip"):
                slip = evaluate_slip(contact, state.markers, field_, cfg.slip)
            if slip.insufficient:
                flags.append("slip_insufficient_fit")
        except ApplicationError as e:
            fail(e, "slip")

    timer.finish()
    report.area_fraction = contact.area_fraction
    report.contact = contact
    report.shear = shear
    report.slip = slip if contact.area_fraction > 0 else SlipReport()
    report.displacement = field_
    report.flags = flags
    report.timing = timer.to_dict()
    return report


def annotate(frame: Frame, report: ContactReport, vector_scale: float = 3.0) -> np.ndarray:
    """Annotated RGB image of a processed frame."""
    field_ = report.displacement if report.displacement is not None else DisplacementField.empty()
    rigid = None
    if report.slip.transform is not None and len(field_):
        rigid = report.slip.transform.apply(field_.ref_points) - field_.ref_points
    return annotate_frame(frame.data, report.contours, field_.ref_points, field_.vectors,
                          rigid_vectors=rigid, slip=report.slip.slip, vector_scale=vector_scale)


def run_sequence(
    source: Iterable[Frame],
    cfg: PipelineConfig,
    out: Union[str, Path] = "-",
    annotate_dir: Optional[Union[str, Path]] = None,
    fps_report: bool = False,
    reference: Optional[Frame] = None,
) -> int:
    """
    Process a frame stream and write one JSON line per processed frame.

    The first `reference.first_n` frames build the reference unless an explicit
    reference frame is given; they are processed like every other frame.

    Args:
        source: Frames in stream order
        cfg: Pipeline configuration
        out: JSON-lines path, or "-" for stdout
        annotate_dir: Directory for annotated PNG frames
        fps_report: Print the throughput summary when done
        reference: Explicit no-contact reference frame

    Returns:
        Exit status (0)

    Raises:
        InitializationError: If the reference cannot be established
        InputError: If the source is unreadable
    """
    frames = iter(source)
    if reference is not None:
        ref_frames: List[Frame] = [reference]
        stream: Iterator[Frame] = frames
    else:
        head = list(islice(frames, cfg.reference.first_n))
        ref_frames = head
        stream = chain(head, frames)

    ref_frame, ref_markers = init_reference(ref_frames, cfg)
    state = PipelineState.create(ref_frame, ref_markers, cfg)
    workers = cfg.effective_workers()
    annotate_path = Path(annotate_dir) if annotate_dir is not None else None

    def work(frame: Frame) -> Tuple[Frame, ContactReport]:
        return frame, process_frame(frame, state, cfg)

    selected = (f for i, f in enumerate(stream) if i % cfg.output.stride == 0)
    try:
        with JsonLinesWriter(out) as sink:
            for frame, report in map_ordered(work, selected, workers=workers):
                state.monitor.record(report.timing)
                sink.write(report_to_json(report, cfg.output))
                if annotate_path is not None:
                    save_frame(annotate_path / f"{frame.index:05d}.png",
                               annotate(frame, report, cfg.output.vector_scale))
    finally:
        state.monitor.stop()
        state.close()

    state.monitor.log_summary()
    if state.errors.error_count:
        logger.warning(f"{state.errors.error_count} frame errors were flagged")
    if fps_report:
        stream_out = sys.stderr if str(out) == "-" else sys.stdout
        for line in state.monitor.format_report():
            print(line, file=stream_out)
    return 0


def run_benchmark(
    frames: Sequence[Frame],
    cfg: PipelineConfig,
    count: int = 500,
    reference_frames: Optional[Sequence[Frame]] = None,
) -> Dict[str, Any]:
    """
    Time process_frame over `count` frames cycled from a pre-rendered set.

    Args:
        frames: Distinct frames to cycle through
        cfg: Pipeline configuration
        count: Number of frames to process
        reference_frames: No-contact frames for the reference (default: first `reference.first_n`)

    Returns:
        PerformanceMonitor report with the frame count and FPS figures
    """
    if not frames:
        raise InputError("Benchmark needs at least one frame")
    if count < 1:
        raise ConfigurationError(f"Benchmark frame count must be >= 1, got {count}")
    if reference_frames is None:
        reference_frames = list(frames[:cfg.reference.first_n])
    ref_frame, ref_markers = init_reference(reference_frames, cfg)
    state = PipelineState.create(ref_frame, ref_markers, cfg)
    stream = (frames[i % len(frames)].with_index(i) for i in range(count))

    try:
        for report in map_ordered(lambda f: process_frame(f, state, cfg), stream, workers=cfg.effective_workers()):
            state.monitor.record(report.timing)
    finally:
        state.monitor.stop()
        state.close()

    state.monitor.log_summary()
    return state.monitor.generate_report()
