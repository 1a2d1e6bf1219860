"""
Error handling and exception management for Viko Contact.

This module provides:
- Custom exception classes for every pipeline stage
- Structured error reports for per-frame failures
- A bounded per-frame error log so streams keep running
"""

import functools
import logging
import threading
import traceback
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Callable, Dict, List, Optional

# Logger setup
logger = logging.getLogger(__name__)


class ApplicationError(Exception):
    """Base exception class for application-specific errors."""

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        self.message = message
        self.context = context or {}
        super().__init__(message)


class ConfigurationError(ApplicationError):
    """Error raised for configuration issues."""
    pass


class InputError(ApplicationError):
    """Error raised for malformed frames, dimension mismatches or non-finite values."""
    pass


class PreconditionError(ApplicationError):
    """Error raised when an operation is called outside its preconditions."""
    pass


class CalibrationError(ApplicationError):
    """Error raised when a shear calibration cannot be fitted or is not monotonic."""
    pass


class InsufficientDataError(ApplicationError):
    """Error raised when too few marker pairs are available for a rigid fit."""
    pass


class SegmentationUnavailableError(ApplicationError):
    """Error raised when the external segmenter times out or goes away."""
    pass


class InitializationError(ApplicationError):
    """Error raised when the no-contact reference cannot be established."""
    pass


class SpecError(ApplicationError):
    """Error raised for invalid simulator geometry."""
    pass


class DatasetIOError(ApplicationError):
    """Error raised for dataset or output write failures."""
    pass


class ScenarioError(ApplicationError):
    """Error raised when a scenario or protocol file cannot be parsed."""
    pass


@dataclass
class ErrorReport:
    """Data class for structured error reports."""

    error_type: str
    error_message: str
    traceback: str = ""
    frame_index: Optional[int] = None
    timestamp: datetime = field(default_factory=datetime.now)
    context: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_exception(cls, exception: BaseException, frame_index: Optional[int] = None,
                       context: Optional[Dict[str, Any]] = None) -> "ErrorReport":
        """Build a report from a caught exception."""
        merged = dict(getattr(exception, "context", {}) or {})
        merged.update(context or {})
        return cls(
            error_type=type(exception).__name__,
            error_message=str(exception),
            traceback="".join(traceback.format_exception(type(exception), exception, exception.__traceback__)),
            frame_index=frame_index,
            context=merged,
        )

    def to_dict(self) -> Dict[str, Any]:
        """Convert error report to dictionary for serialization."""
        return {
            "error_type": self.error_type,
            "error_message": self.error_message,
            "frame_index": self.frame_index,
            "timestamp": self.timestamp.isoformat(),
            "context": self.context,
        }

    def as_flag(self) -> str:
        """Render the report as a ContactReport flag."""
        return f"error:{self.error_type}"

    def log_error(self) -> None:
        """Log the error to the application log."""
        where = f" (frame {self.frame_index})" if self.frame_index is not None else ""
        logger.error(f"ERROR{where}: {self.error_type}: {self.error_message}")
        logger.debug(f"Error context: {self.context}")
        logger.debug(f"Traceback: {self.traceback}")


class ErrorHandler:
    """
    Collects per-frame error reports without interrupting the stream.
    Keeps only the most recent `max_reports` entries.
    """

    def __init__(self, max_reports: int = 100):
        self.max_reports = max_reports
        self._reports: List[ErrorReport] = []
        self._lock = threading.Lock()
        self.error_count = 0

    def handle_exception(self, exception: BaseException, frame_index: Optional[int] = None,
                         context: Optional[Dict[str, Any]] = None) -> ErrorReport:
        """
        Record and log an exception raised while processing a frame.

        Args:
            exception: The exception to handle
            frame_index: Index of the frame being processed
            context: Additional context information

        Returns:
            ErrorReport describing the failure
        """
        report = ErrorReport.from_exception(exception, frame_index=frame_index, context=context)
        report.log_error()
        with self._lock:
            self._reports.append(report)
            if len(self._reports) > self.max_reports:
                self._reports = self._reports[-self.max_reports:]
            self.error_count += 1
        return report

    def get_reports(self) -> List[ErrorReport]:
        """Return a copy of the recorded reports."""
        with self._lock:
            return list(self._reports)

    def clear(self) -> None:
        """Forget all recorded reports."""
        with self._lock:
            self._reports.clear()
            self.error_count = 0


def exit_code_for(exception: BaseException) -> int:
    """Map an exception escaping a CLI command to a process exit status."""
    if isinstance(exception, ApplicationError):
        return 2
    return 1


def cli_errors(func: Callable[..., int]) -> Callable[..., int]:
    """
    Decorator for CLI commands: logs failures and converts them to exit codes.

    Example usage:

    @cli_errors
    def cmd_run(args):
        ...
    """
    @functools.wraps(func)
    def wrapper(*args, **kwargs) -> int:
        try:
            return func(*args, **kwargs)
        except ApplicationError as e:
            logger.error(f"{type(e).__name__}: {e.message}")
            if e.context:
                logger.debug(f"Error context: {e.context}")
            return exit_code_for(e)
        except Exception as e:
            logger.critical(f"Unexpected error in {func.__name__}: {e}", exc_info=True)
            return exit_code_for(e)

    return wrapper
