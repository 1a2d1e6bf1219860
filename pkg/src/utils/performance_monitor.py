"""
Performance monitoring utilities for Viko Contact.
Per-stage frame timing and throughput reporting.
"""

import logging
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import psutil

# Set up logging
logger = logging.getLogger(__name__)

STAGES = ("segmentation", "markers", "matching", "shear", "slip")


class StageTimer:
    """
    Collects per-stage microseconds for one frame.

    Example:
        timer = StageTimer()
        with timer.stage("segmentation"):
            segment(...)
        timer.finish()
    """

    def __init__(self):
        self._start_ns = time.perf_counter_ns()
        self._end_ns: Optional[int] = None
        self.stages: Dict[str, int] = {}

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter_ns()
        try:
            yield
        finally:
            elapsed = time.perf_counter_ns() - start
            self.stages[name] = self.stages.get(name, 0) + elapsed // 1000

    def finish(self) -> int:
        """Stop the frame clock; returns total microseconds."""
        if self._end_ns is None:
            self._end_ns = time.perf_counter_ns()
        return self.total_us

    @property
    def total_us(self) -> int:
        end = self._end_ns if self._end_ns is not None else time.perf_counter_ns()
        return (end - self._start_ns) // 1000

    def to_dict(self, zeroed: bool = False) -> Dict[str, int]:
        """Stage timings plus `total`; zeroed for byte-reproducible output."""
        timings = {name: (0 if zeroed else int(self.stages.get(name, 0))) for name in STAGES}
        timings["total"] = 0 if zeroed else int(self.total_us)
        return timings


@dataclass
class StageStats:
    count: int = 0
    total_us: int = 0
    min_us: Optional[int] = None
    max_us: Optional[int] = None

    def add(self, value: int) -> None:
        self.count += 1
        self.total_us += value
        self.min_us = value if self.min_us is None else min(self.min_us, value)
        self.max_us = value if self.max_us is None else max(self.max_us, value)

    @property
    def mean_us(self) -> float:
        return self.total_us / self.count if self.count else 0.0


@dataclass
class PerformanceMonitor:
    """
    Aggregates StageTimers over a run: per-stage statistics, processing FPS
    (from mean total latency), wall-clock FPS and process memory.
    """

    stats: Dict[str, StageStats] = field(default_factory=dict)
    frames: int = 0
    _wall_start: float = field(default_factory=time.perf_counter)
    _wall_end: Optional[float] = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, timings: Dict[str, int]) -> None:
        with self._lock:
            self.frames += 1
            for name, value in timings.items():
                self.stats.setdefault(name, StageStats()).add(int(value))

    def stop(self) -> None:
        self._wall_end = time.perf_counter()

    @property
    def wall_seconds(self) -> float:
        end = self._wall_end if self._wall_end is not None else time.perf_counter()
        return end - self._wall_start

    @property
    def mean_fps(self) -> float:
        total = self.stats.get("total")
        if total is None or total.mean_us <= 0:
            return 0.0
        return 1e6 / total.mean_us

    @property
    def wall_fps(self) -> float:
        seconds = self.wall_seconds
        return self.frames / seconds if seconds > 0 else 0.0

    def generate_report(self) -> Dict[str, Any]:
        """
        Generate a performance report.

        Returns:
            Dictionary with frame count, FPS figures, RSS and per-stage statistics
        """
        memory = psutil.Process().memory_info().rss
        with self._lock:
            stages = {
                name: {
                    "count": s.count,
                    "mean_us": round(s.mean_us, 1),
                    "min_us": s.min_us,
                    "max_us": s.max_us,
                }
                for name, s in self.stats.items()
            }
        return {
            "frames": self.frames,
            "mean_fps": round(self.mean_fps, 2),
            "wall_fps": round(self.wall_fps, 2),
            "wall_seconds": round(self.wall_seconds, 3),
            "rss_mb": round(memory / (1024 * 1024), 1),
            "stages": stages,
        }

    def log_summary(self, level: int = logging.INFO) -> None:
        report = self.generate_report()
        logger.log(level, f"Processed {report['frames']} frames: {report['mean_fps']:.1f} FPS "
                          f"(wall {report['wall_fps']:.1f} FPS), RSS {report['rss_mb']:.1f} MB")
        for name, s in report["stages"].items():
            logger.log(level, f"  {name:<13} mean {s['mean_us']:>9.1f} us  min {s['min_us']}  max {s['max_us']}")

    def format_report(self) -> List[str]:
        """Plain-text lines for the --fps-report summary."""
        report = self.generate_report()
        lines = [f"frames={report['frames']} mean_fps={report['mean_fps']:.2f} "
                 f"wall_fps={report['wall_fps']:.2f} rss_mb={report['rss_mb']:.1f}"]
        for name, s in report["stages"].items():
            lines.append(f"{name}: mean_us={s['mean_us']:.1f} min_us={s['min_us']} max_us={s['max_us']}")
        return lines
