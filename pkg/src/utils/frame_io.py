"""
Frame and mask I/O: PNG files, frame directories and raw RGB24 streams.
Images are RGB in memory; OpenCV's BGR order is confined to this module.
"""

import logging
from pathlib import Path
from typing import BinaryIO, Iterator, List, Union

import cv2
import numpy as np

from src.config import DEFAULT_FRAME_HEIGHT, DEFAULT_FRAME_WIDTH
from src.core.imaging import BinaryMask, Frame
from src.utils.error_handling import DatasetIOError, InputError

# Set up logging
logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def load_frame(path: Union[str, Path], index: int = 0) -> Frame:
    """
    Read an RGB frame from an image file.

    Raises:
        InputError: If the file is missing or not a decodable image
    """
    path = Path(path)
    data = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if data is None:
        raise InputError(f"Could not read image {path}", {"path": str(path)})
    return Frame(data=cv2.cvtColor(data, cv2.COLOR_BGR2RGB), index=index)


def _write(path: Path, image: np.ndarray, params: List[int]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        ok, buffer = cv2.imencode(path.suffix or ".png", image, params)
        if not ok:
            raise DatasetIOError(f"Could not encode {path}")
        path.write_bytes(buffer.tobytes())
    except OSError as e:
        raise DatasetIOError(f"Could not write {path}: {e}", {"path": str(path)})
    return path


def save_frame(path: Union[str, Path], frame: Union[Frame, np.ndarray]) -> Path:
    data = frame.data if isinstance(frame, Frame) else frame
    return _write(Path(path), cv2.cvtColor(data, cv2.COLOR_RGB2BGR), [cv2.IMWRITE_PNG_COMPRESSION, 3])


def save_mask(path: Union[str, Path], mask: BinaryMask) -> Path:
    """1-bit PNG with 255 for set pixels."""
    return _write(Path(path), mask.as_uint8(255), [cv2.IMWRITE_PNG_BILEVEL, 1])


def load_mask(path: Union[str, Path]) -> BinaryMask:
    path = Path(path)
    data = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if data is None:
        raise InputError(f"Could not read mask {path}", {"path": str(path)})
    return BinaryMask(data >= 128)


def list_frame_files(directory: Union[str, Path]) -> List[Path]:
    """Image files of a directory in name order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"Input directory not found: {directory}", {"path": str(directory)})
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def iter_frame_dir(directory: Union[str, Path]) -> Iterator[Frame]:
    """Frames of a directory in name order, indexed from 0."""
    files = list_frame_files(directory)
    if not files:
        raise InputError(f"No image files in {directory}")
    logger.info(f"Reading {len(files)} frames from {directory}")
    for index, path in enumerate(files):
        yield load_frame(path, index=index)


def iter_raw_stream(stream: BinaryIO, width: int = DEFAULT_FRAME_WIDTH,
                    height: int = DEFAULT_FRAME_HEIGHT) -> Iterator[Frame]:
    """
    Frames from a headerless RGB24 byte stream.

    Raises:
        InputError: If the stream ends inside a frame
    """
    frame_bytes = width * height * 3
    index = 0
    while True:
        buffer = stream.read(frame_bytes)
        if not buffer:
            return
        while len(buffer) < frame_bytes:
            chunk = stream.read(frame_bytes - len(buffer))
            if not chunk:
                raise InputError(f"Raw stream ended inside frame {index} ({len(buffer)} of {frame_bytes} bytes)")
            buffer += chunk
        yield Frame.from_bytes(buffer, width, height, index=index)
        index += 1
