"""
External segmentation service for Viko Contact.
Exchanges frames and masks with an out-of-process segmentation model, either through
an exchange directory or over a length-prefixed PNG stream on a child process.
"""

import atexit
import logging
import queue
import struct
import subprocess
import threading
import time
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from src.core.imaging import Frame
from src.utils.error_handling import SegmentationUnavailableError

# Setup logger
logger = logging.getLogger(__name__)

_LENGTH_PREFIX = struct.Struct(">I")
_MAX_MESSAGE_BYTES = 64 * 1024 * 1024

# Global tracking of model processes for cleanup
_active_processes = set()
_process_lock = threading.RLock()


@atexit.register
def _cleanup_on_exit():
    """Ensure all model processes are terminated on program exit."""
    _terminate_all_processes()


def _register_process(process: subprocess.Popen):
    with _process_lock:
        _active_processes.add(process)


def _unregister_process(process: subprocess.Popen):
    with _process_lock:
        _active_processes.discard(process)


def _terminate_process(process: subprocess.Popen) -> None:
    if process.poll() is not None:
        return
    try:
        process.terminate()
        process.wait(timeout=1.0)
    except subprocess.TimeoutExpired:
        logger.warning(f"Segmenter process {process.pid} did not terminate gracefully. Killing.")
        process.kill()
        process.wait(timeout=1.0)
    except OSError as e:
        logger.error(f"Error terminating segmenter process {process.pid}: {e}")


def _terminate_all_processes():
    with _process_lock:
        for process in list(_active_processes):
            _terminate_process(process)
        _active_processes.clear()


def encode_png(image: np.ndarray) -> bytes:
    """PNG bytes of an RGB frame or a single-channel mask."""
    if image.ndim == 3:
        image = cv2.cvtColor(image, cv2.COLOR_RGB2BGR)
    ok, buffer = cv2.imencode(".png", image)
    if not ok:
        raise SegmentationUnavailableError("Could not encode request PNG")
    return buffer.tobytes()


def decode_mask(payload: bytes) -> Optional[np.ndarray]:
    """Single-channel uint8 mask from PNG bytes, or None when the bytes do not decode."""
    if not payload:
        return None
    return cv2.imdecode(np.frombuffer(payload, dtype=np.uint8), cv2.IMREAD_GRAYSCALE)


class ExternalSegmenter:
    """
    Client for one external segmentation model.

    One request is in flight at a time; instances are independent of each other.
    """

    def __init__(self, params):
        """
        Args:
            params: ExternalParams (mode, exchange_dir, command, timeout_ms, poll_interval_ms)
        """
        self.params = params
        self.timeout = params.timeout_ms / 1000.0
        self._lock = threading.Lock()
        self._process: Optional[subprocess.Popen] = None
        self._responses: "queue.Queue[Optional[bytes]]" = queue.Queue()
        self._reader: Optional[threading.Thread] = None
        self._opened = False

    # ===== Lifecycle =====

    def open(self) -> "ExternalSegmenter":
        if self._opened:
            return self
        if self.params.mode == "file":
            exchange = Path(self.params.exchange_dir)
            try:
                exchange.mkdir(parents=True, exist_ok=True)
            except OSError as e:
                raise SegmentationUnavailableError(f"Exchange directory {exchange} is not usable: {e}")
            logger.info(f"External segmenter using exchange directory {exchange}")
        else:
            self._start_process()
        self._opened = True
        return self

    def _start_process(self) -> None:
        command = list(self.params.command)
        try:
            self._process = subprocess.Popen(
                command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
            )
        except OSError as e:
            raise SegmentationUnavailableError(f"Could not start segmenter {command}: {e}")
        _register_process(self._process)

        self._reader = threading.Thread(
            target=self._read_responses,
            args=(self._process.stdout,),
            name="segmenter-reader",
            daemon=True,
        )
        self._reader.start()
        logger.info(f"Started external segmenter process {self._process.pid}: {' '.join(command)}")

    def _read_responses(self, stream) -> None:
        """Reader thread: pushes each response payload, then None at end of stream."""
        try:
            while True:
                header = stream.read(_LENGTH_PREFIX.size)
                if len(header) < _LENGTH_PREFIX.size:
                    break
                (length,) = _LENGTH_PREFIX.unpack(header)
                if length > _MAX_MESSAGE_BYTES:
                    logger.error(f"Segmenter sent an oversized message ({length} bytes)")
                    break
                payload = stream.read(length)
                if len(payload) < length:
                    break
                self._responses.put(payload)
        except (OSError, ValueError) as e:
            logger.debug(f"Segmenter reader stopped: {e}")
        finally:
            self._responses.put(None)

    def close(self) -> None:
        if self._process is not None:
            try:
                if self._process.stdin:
                    self._process.stdin.close()
            except OSError:
                pass
            _terminate_process(self._process)
            _unregister_process(self._process)
            logger.debug(f"External segmenter process {self._process.pid} stopped")
            self._process = None
        self._opened = False

    def __enter__(self) -> "ExternalSegmenter":
        return self.open()

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        self.close()

    # ===== Requests =====

    def request(self, frame: Frame) -> np.ndarray:
        """
        Send one frame and wait for its mask.

        Args:
            frame: Frame to segment

        Returns:
            (height, width) uint8 mask image

        Raises:
            SegmentationUnavailableError: On timeout, a dead process or an undecodable reply
        """
        if not self._opened:
            self.open()
        with self._lock:
            if self.params.mode == "file":
                return self._request_file(frame)
            return self._request_stream(frame)

    def _request_file(self, frame: Frame) -> np.ndarray:
        exchange = Path(self.params.exchange_dir)
        request_path = exchange / f"req_{frame.index}.png"
        response_path = exchange / f"resp_{frame.index}.png"
        staging_path = exchange / f".req_{frame.index}.png.tmp"

        try:
            staging_path.write_bytes(encode_png(frame.data))
            staging_path.replace(request_path)
        except OSError as e:
            raise SegmentationUnavailableError(f"Could not write request {request_path}: {e}")

        deadline = time.monotonic() + self.timeout
        poll = self.params.poll_interval_ms / 1000.0
        while True:
            if response_path.exists():
                try:
                    mask = decode_mask(response_path.read_bytes())
                except OSError:
                    mask = None
                if mask is not None:
                    for path in (response_path, request_path):
                        path.unlink(missing_ok=True)
                    return mask
            if time.monotonic() >= deadline:
                request_path.unlink(missing_ok=True)
                raise SegmentationUnavailableError(
                    f"No response for frame {frame.index} within {self.params.timeout_ms:g} ms",
                    {"frame": frame.index, "exchange_dir": str(exchange)},
                )
            time.sleep(poll)

    def _request_stream(self, frame: Frame) -> np.ndarray:
        process = self._process
        if process is None or process.poll() is not None:
            raise SegmentationUnavailableError("Segmenter process is not running", {"frame": frame.index})

        # Late replies to timed-out requests would answer the wrong frame
        while True:
            try:
                stale = self._responses.get_nowait()
            except queue.Empty:
                break
            if stale is None:
                self._responses.put(None)
                raise SegmentationUnavailableError("Segmenter process closed its output", {"frame": frame.index})

        payload = encode_png(frame.data)
        try:
            process.stdin.write(_LENGTH_PREFIX.pack(len(payload)) + payload)
            process.stdin.flush()
        except (BrokenPipeError, OSError, ValueError) as e:
            raise SegmentationUnavailableError(f"Could not send frame {frame.index} to segmenter: {e}")

        try:
            reply = self._responses.get(timeout=self.timeout)
        except queue.Empty:
            raise SegmentationUnavailableError(
                f"No response for frame {frame.index} within {self.params.timeout_ms:g} ms",
                {"frame": frame.index},
            )
        if reply is None:
            self._responses.put(None)
            raise SegmentationUnavailableError("Segmenter process closed its output", {"frame": frame.index})

        mask = decode_mask(reply)
        if mask is None:
            raise SegmentationUnavailableError(f"Segmenter reply for frame {frame.index} is not a PNG image")
        return mask
