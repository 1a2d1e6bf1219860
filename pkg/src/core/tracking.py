"""
Marker tracking: match the no-contact reference markers b_0 to the current markers b_i
through a k-d tree and emit the displacement vector field U_i.
"""

import logging
from dataclasses import dataclass, field
from typing import Iterator, List, Tuple

import numpy as np
from scipy.spatial import cKDTree

from src.config import MARKER_PITCH_MM
from src.core.imaging import MarkerSet
from src.utils.error_handling import ConfigurationError, PreconditionError

# Set up logging
logger = logging.getLogger(__name__)

# Candidates fetched per query; covers every tie on a square lattice
_TIE_CANDIDATES = 8


@dataclass(frozen=True)
class MatchConfig:
    """Matching distance cap, expressed in millimetres on the membrane."""

    max_match_distance_mm: float = MARKER_PITCH_MM / 2.0

    def __post_init__(self):
        if self.max_match_distance_mm <= 0:
            raise ConfigurationError(f"max_match_distance_mm must be > 0, got {self.max_match_distance_mm}")

    def to_pixels(self, px_per_mm: float) -> float:
        return float(self.max_match_distance_mm * px_per_mm)


class SpatialIndex:
    """
    Immutable 2D nearest-neighbour index over MarkerSet centroids.

    Ties are broken towards the lower marker index, which is the lower (y, x)
    because MarkerSets are kept sorted.
    """

    def __init__(self, markers: MarkerSet):
        if len(markers) == 0:
            raise PreconditionError("Cannot build a spatial index over an empty MarkerSet")
        points = np.array(markers.centroids, dtype=np.float64)
        points.setflags(write=False)
        self._points = points
        self._tree = cKDTree(points)

    def __len__(self) -> int:
        return len(self._points)

    @property
    def points(self) -> np.ndarray:
        return self._points

    def nearest(self, queries) -> Tuple[np.ndarray, np.ndarray]:
        """
        Exact nearest centroid for each query point.

        Args:
            queries: (M, 2) array or a single (x, y) point

        Returns:
            (distances, indices), each of length M
        """
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
        k = min(len(self._points), _TIE_CANDIDATES)
        _, indices = self._tree.query(queries, k=k)
        indices = np.asarray(indices).reshape(len(queries), k)

        candidates = self._points[indices]
        distances = np.hypot(candidates[..., 0] - queries[:, None, 0], candidates[..., 1] - queries[:, None, 1])
        order = np.lexsort((indices, distances))
        best = order[:, 0]
        rows = np.arange(len(queries))
        return distances[rows, best], indices[rows, best]

    def candidates(self, queries, k: int, max_distance: float) -> Tuple[np.ndarray, np.ndarray]:
        """
        Up to k neighbours per query within max_distance (inclusive).

        Missing neighbours have distance inf and index len(self).
        """
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
        k = max(1, min(k, len(self._points)))
        bound = max_distance * (1.0 + 1e-9) + 1e-12
        distances, indices = self._tree.query(queries, k=k, distance_upper_bound=bound)
        return (np.asarray(distances, dtype=np.float64).reshape(len(queries), k),
                np.asarray(indices, dtype=np.int64).reshape(len(queries), k))


def build_index(markers: MarkerSet) -> SpatialIndex:
    """Build the k-d tree over a non-empty MarkerSet."""
    return SpatialIndex(markers)


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """
    Injective pairing of reference markers to current markers.

    Row p of each array describes one pair; vectors are current minus reference positions.
    """

    ref_indices: np.ndarray
    cur_indices: np.ndarray
    ref_points: np.ndarray
    cur_points: np.ndarray
    unmatched_ref: List[int] = field(default_factory=list)
    unmatched_cur: List[int] = field(default_factory=list)

    @classmethod
    def empty(cls, n_ref: int = 0, n_cur: int = 0) -> "DisplacementField":
        return cls(
            ref_indices=np.empty(0, dtype=np.int64),
            cur_indices=np.empty(0, dtype=np.int64),
            ref_points=np.empty((0, 2)),
            cur_points=np.empty((0, 2)),
            unmatched_ref=list(range(n_ref)),
            unmatched_cur=list(range(n_cur)),
        )

    def __len__(self) -> int:
        return len(self.ref_indices)

    @property
    def vectors(self) -> np.ndarray:
        return self.cur_points - self.ref_points

    @property
    def pairs(self) -> Iterator[Tuple[int, int, Tuple[float, float]]]:
        for r, c, v in zip(self.ref_indices, self.cur_indices, self.vectors):
            yield int(r), int(c), (float(v[0]), float(v[1]))

    def subset(self, rows) -> "DisplacementField":
        """Pairs selected by row; unmatched lists are not carried over."""
        rows = np.asarray(rows, dtype=np.int64)
        return DisplacementField(
            ref_indices=self.ref_indices[rows],
            cur_indices=self.cur_indices[rows],
            ref_points=self.ref_points[rows],
            cur_points=self.cur_points[rows],
        )

    def to_json_array(self, decimals: int = 4) -> List[List[float]]:
        """Arrays of [x0, y0, dx, dy] for per-frame diagnostics."""
        rows = np.hstack([self.ref_points, self.vectors]) if len(self) else np.empty((0, 4))
        return [[round(float(v), decimals) for v in row] for row in rows]


def match_markers(ref: MarkerSet, cur: MarkerSet, max_match_distance: float) -> DisplacementField:
    """
    Greedy mutual-nearest-neighbour matching with a distance cap.

    Candidate pairs within the cap are accepted in order of increasing distance
    (ties by reference then current position) while both markers are still free,
    so the result is injective both ways and every mutual nearest pair is kept.

    Args:
        ref: No-contact reference markers b_0
        cur: Current markers b_i
        max_match_distance: Cap in pixels (inclusive)

    Returns:
        DisplacementField with unmatched markers listed separately
    """
    if len(ref) == 0 or len(cur) == 0 or max_match_distance <= 0:
        return DisplacementField.empty(len(ref), len(cur))

    ref_pts, cur_pts = ref.centroids, cur.centroids
    index = SpatialIndex(cur)
    _, idx = index.candidates(ref_pts, k=4, max_distance=max_match_distance)

    k = idx.shape[1]
    cand_ref = np.repeat(np.arange(len(ref_pts)), k)
    cand_cur = idx.ravel()
    valid = cand_cur < len(cur_pts)
    cand_ref, cand_cur = cand_ref[valid], cand_cur[valid]

    delta = cur_pts[cand_cur] - ref_pts[cand_ref]
    dist = np.hypot(delta[:, 0], delta[:, 1])
    within = dist <= max_match_distance
    cand_ref, cand_cur, dist = cand_ref[within], cand_cur[within], dist[within]

    order = np.lexsort((
        cur_pts[cand_cur, 0], cur_pts[cand_cur, 1],
        ref_pts[cand_ref, 0], ref_pts[cand_ref, 1],
        dist,
    ))

    ref_taken = np.zeros(len(ref_pts), dtype=bool)
    cur_taken = np.zeros(len(cur_pts), dtype=bool)
    accepted: List[Tuple[int, int]] = []
    for i in order:
        r, c = int(cand_ref[i]), int(cand_cur[i])
        if ref_taken[r] or cur_taken[c]:
            continue
        ref_taken[r] = cur_taken[c] = True
        accepted.append((r, c))

    accepted.sort()
    ref_idx = np.array([a[0] for a in accepted], dtype=np.int64)
    cur_idx = np.array([a[1] for a in accepted], dtype=np.int64)

    result = DisplacementField(
        ref_indices=ref_idx,
        cur_indices=cur_idx,
        ref_points=ref_pts[ref_idx] if len(ref_idx) else np.empty((0, 2)),
        cur_points=cur_pts[cur_idx] if len(cur_idx) else np.empty((0, 2)),
        unmatched_ref=[int(i) for i in np.flatnonzero(~ref_taken)],
        unmatched_cur=[int(i) for i in np.flatnonzero(~cur_taken)],
    )
    if result.unmatched_ref or result.unmatched_cur:
        logger.debug(f"Frame {cur.frame_index}: {len(result.unmatched_ref)} reference and "
                     f"{len(result.unmatched_cur)} current markers unmatched")
    return result
