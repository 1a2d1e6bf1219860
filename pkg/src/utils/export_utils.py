"""
Export utilities for Viko Contact.
Handles JSON documents, the JSON-lines report stream, CSV traces and annotated frames.
"""

import csv
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, TextIO, Union

import cv2
import numpy as np

from src.utils.error_handling import DatasetIOError

# Logger setup
logger = logging.getLogger(__name__)

# Annotation colours, RGB
CONTOUR_COLOR = (0, 200, 0)
VECTOR_COLOR = (230, 0, 0)
RIGID_COLOR = (0, 80, 255)


def dumps_compact(data: Any) -> str:
    """Single-line JSON with a fixed key order for reproducible streams."""
    return json.dumps(data, separators=(",", ":"), ensure_ascii=False)


def write_json(path: Union[str, Path], data: Any) -> Path:
    """
    Write a JSON document with sorted keys.

    Raises:
        DatasetIOError: If the file cannot be written
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True, ensure_ascii=False)
            f.write("\n")
    except OSError as e:
        raise DatasetIOError(f"Could not write {path}: {e}", {"path": str(path)})
    return path


def read_json(path: Union[str, Path]) -> Any:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


class JsonLinesWriter:
    """
    One JSON object per line to a file, or to stdout for "-".

    Example:
        with JsonLinesWriter(out_path) as sink:
            sink.write(report_dict)
    """

    def __init__(self, target: Union[str, Path]):
        self.target = str(target)
        self._stream: Optional[TextIO] = None
        self._owns_stream = False
        self.lines = 0

    def open(self) -> "JsonLinesWriter":
        if self.target == "-":
            self._stream = sys.stdout
        else:
            path = Path(self.target)
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                self._stream = open(path, "w", encoding="utf-8", newline="\n")
            except OSError as e:
                raise DatasetIOError(f"Could not open output {path}: {e}", {"path": str(path)})
            self._owns_stream = True
        return self

    def write(self, record: Dict[str, Any]) -> None:
        if self._stream is None:
            self.open()
        self._stream.write(dumps_compact(record) + "\n")
        self.lines += 1

    def close(self) -> None:
        if self._stream is None:
            return
        self._stream.flush()
        if self._owns_stream:
            self._stream.close()
        self._stream = None

    def __enter__(self) -> "JsonLinesWriter":
        return self.open()

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        self.close()


def write_csv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """
    Write a CSV file with a header row.

    Raises:
        DatasetIOError: If the file cannot be written
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow(row)
    except OSError as e:
        raise DatasetIOError(f"Could not write {path}: {e}", {"path": str(path)})
    return path


def annotate_frame(
    image: np.ndarray,
    contours: List[np.ndarray],
    ref_points: np.ndarray,
    vectors: np.ndarray,
    rigid_vectors: Optional[np.ndarray] = None,
    slip: bool = False,
    vector_scale: float = 3.0,
) -> np.ndarray:
    """
    Draw contact contours (green), marker vectors (red) and the rigid-body field (blue).

    Args:
        image: RGB frame, not modified
        contours: Outer contact contours as (K, 2) point arrays
        ref_points: (N, 2) reference marker positions, arrow tails
        vectors: (N, 2) observed displacements
        rigid_vectors: (M, 2) rigid-model displacements of the first M markers, if fitted
        slip: Draw a SLIP banner
        vector_scale: Arrow length multiplier

    Returns:
        Annotated RGB copy
    """
    canvas = np.ascontiguousarray(image.copy())
    if contours:
        cv2.drawContours(canvas, [c.reshape(-1, 1, 2).astype(np.int32) for c in contours], -1, CONTOUR_COLOR, 2)

    def arrows(vecs: np.ndarray, color) -> None:
        for (x, y), (dx, dy) in zip(ref_points, vecs):
            tail = (int(round(x)), int(round(y)))
            head = (int(round(x + dx * vector_scale)), int(round(y + dy * vector_scale)))
            if tail != head:
                cv2.arrowedLine(canvas, tail, head, color, 1, cv2.LINE_AA, tipLength=0.3)

    if rigid_vectors is not None and len(rigid_vectors):
        arrows(rigid_vectors, RIGID_COLOR)
    if len(vectors):
        arrows(vectors, VECTOR_COLOR)

    if slip:
        cv2.rectangle(canvas, (0, 0), (canvas.shape[1] - 1, 22), VECTOR_COLOR, thickness=cv2.FILLED)
        cv2.putText(canvas, "SLIP", (6, 17), cv2.FONT_HERSHEY_SIMPLEX, 0.6, (255, 255, 255), 2, cv2.LINE_AA)
    return canvas
