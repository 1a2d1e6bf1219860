"""
Synthetic segmentation dataset generation.

Each shape is pressed at positions on a 2 mm lattice with a random indent depth;
frames, 1-bit label masks and JSON sidecars are written with a manifest holding
the train/val/test split.
"""

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np

from src.config import SCHEMA_VERSION
from src.simulation.renderer import render_frame
from src.simulation.sensor import DEPTH_RANGE_MM, GroundTruth, SceneSpec, SensorModel
from src.core.imaging import Frame
from src.utils.error_handling import ScenarioError
from src.utils.export_utils import read_json, write_json
from src.utils.frame_io import save_frame, save_mask
from src.utils.thread_pool import map_ordered

# Set up logging
logger = logging.getLogger(__name__)

DEFAULT_SHAPES = ("cross", "circle", "hexagon", "rectangle")

# Extent of each shape relative to size_mm, for placement inside the sensing area
_SHAPE_EXTENT = {"circle": 1.0, "hexagon": 1.0, "rectangle": math.sqrt(2.0), "cross": 1.06, "polygon": 1.0}


@dataclass(frozen=True)
class DatasetProtocol:
    """How many frames of which shapes, and how they are placed and split."""

    shapes: Tuple[str, ...] = DEFAULT_SHAPES
    count_per_shape: int = 100
    depth_range_mm: Tuple[float, float] = DEPTH_RANGE_MM
    xy_step_mm: float = 2.0
    size_mm: float = 4.0
    split: Tuple[int, int, int] = (7, 2, 1)
    seed: int = 0
    non_contact_frames: int = 0
    polygon_objects: int = 0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "depth_range_mm", tuple(float(v) for v in self.depth_range_mm))
        object.__setattr__(self, "split", tuple(int(v) for v in self.split))
        for shape in self.shapes:
            if shape not in ("circle", "rectangle", "hexagon", "cross"):
                raise ScenarioError(f"Dataset shape '{shape}' is not one of circle, rectangle, hexagon, cross")
        lo, hi = self.depth_range_mm
        if not DEPTH_RANGE_MM[0] <= lo <= hi <= DEPTH_RANGE_MM[1]:
            raise ScenarioError(f"Indent depth range {self.depth_range_mm} must lie within {DEPTH_RANGE_MM} mm")
        if self.count_per_shape < 0 or self.non_contact_frames < 0 or self.polygon_objects < 0:
            raise ScenarioError("Frame counts must be >= 0")
        if self.xy_step_mm <= 0 or self.size_mm <= 0:
            raise ScenarioError("xy_step_mm and size_mm must be positive")
        if len(self.split) != 3 or min(self.split) < 0 or sum(self.split) == 0:
            raise ScenarioError(f"Split must be three non-negative weights, got {self.split}")

    @property
    def total(self) -> int:
        return len(self.shapes) * self.count_per_shape + self.polygon_objects + self.non_contact_frames

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key in ("shapes", "depth_range_mm", "split"):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetProtocol":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ScenarioError(f"Unknown protocol keys: {sorted(unknown)}")
        for key in ("shapes", "depth_range_mm", "split"):
            if key in data:
                data[key] = tuple(data[key])
        try:
            return cls(**data)
        except TypeError as e:
            raise ScenarioError(f"Invalid dataset protocol: {e}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> Tuple["DatasetProtocol", SensorModel]:
        """Protocol file: protocol keys plus an optional `sensor` section."""
        try:
            data = read_json(path)
        except (OSError, ValueError) as e:
            raise ScenarioError(f"Could not read protocol {path}: {e}")
        if not isinstance(data, dict):
            raise ScenarioError(f"Protocol {path} must be a JSON object")
        sensor = SensorModel.from_dict(data.pop("sensor", None))
        return cls.from_dict(data), sensor


def lattice_positions(model: SensorModel, protocol: DatasetProtocol, shape: str) -> np.ndarray:
    """Contact centres (mm) on the XY lattice keeping the shape inside the sensing area."""
    roi = model.sensing_roi()
    half_mm = min(roi.width, roi.height) / 2.0 / model.px_per_mm
    reach = half_mm - protocol.size_mm * _SHAPE_EXTENT[shape] - 0.5
    steps = int(math.floor(reach / protocol.xy_step_mm)) if reach > 0 else 0
    axis = np.arange(-steps, steps + 1) * protocol.xy_step_mm
    xs, ys = np.meshgrid(axis, axis, indexing="xy")
    return np.column_stack([xs.ravel(), ys.ravel()])


def _random_polygon(rng: np.random.Generator, size_mm: float) -> Tuple[Tuple[float, float], ...]:
    """Star-shaped polygon, possibly concave, standing in for an everyday object outline."""
    count = int(rng.integers(5, 9))
    angles = np.sort(rng.uniform(0.0, 2.0 * math.pi, size=count))
    radii = rng.uniform(0.5, 1.0, size=count) * size_mm
    return tuple((float(r * math.cos(a)), float(r * math.sin(a))) for r, a in zip(radii, angles))


def build_scenes(model: SensorModel, protocol: DatasetProtocol) -> List[SceneSpec]:
    """All scenes of a protocol in index order; deterministic for the protocol seed."""
    rng = np.random.default_rng(protocol.seed)
    lo, hi = protocol.depth_range_mm
    scenes: List[SceneSpec] = []

    def add(shape: str, **kwargs) -> None:
        positions = lattice_positions(model, protocol, shape)
        center = positions[int(rng.integers(len(positions)))]
        scenes.append(SceneSpec(
            shape=shape,
            center_mm=(float(center[0]), float(center[1])),
            size_mm=protocol.size_mm,
            rotation_deg=0.0 if shape == "circle" else float(rng.uniform(0.0, 360.0)),
            depth_mm=float(rng.uniform(lo, hi)),
            seed=int(rng.integers(0, 2 ** 31 - 1)),
            **kwargs,
        ))

    for shape in protocol.shapes:
        for _ in range(protocol.count_per_shape):
            add(shape)
    for _ in range(protocol.polygon_objects):
        add("polygon", vertices_mm=_random_polygon(rng, protocol.size_mm))
    for _ in range(protocol.non_contact_frames):
        scenes.append(SceneSpec(shape="none", seed=int(rng.integers(0, 2 ** 31 - 1))))
    return scenes


def split_indices(total: int, split: Sequence[int], seed: int) -> Dict[str, List[int]]:
    """Seeded shuffle cut by weights; every index lands in exactly one split."""
    order = np.random.default_rng(seed).permutation(total)
    weights = sum(split)
    n_train = total * split[0] // weights
    n_val = total * split[1] // weights
    return {
        "train": sorted(int(i) for i in order[:n_train]),
        "val": sorted(int(i) for i in order[n_train:n_train + n_val]),
        "test": sorted(int(i) for i in order[n_train + n_val:]),
    }


def write_sample(root: Path, index: int, frame: Frame, truth: GroundTruth, scene: SceneSpec) -> Dict[str, Any]:
    """Write frames/%05d.png, labels/%05d.png and labels/%05d.json; returns the manifest entry."""
    name = f"{index:05d}"
    save_frame(root / "frames" / f"{name}.png", frame)
    save_mask(root / "labels" / f"{name}.png", truth.mask)
    write_json(root / "labels" / f"{name}.json", {"v": SCHEMA_VERSION, "index": index,
                                                 "scene": scene.to_dict(), "truth": truth.to_dict()})
    return {
        "index": index,
        "shape": scene.shape,
        "frame": f"frames/{name}.png",
        "label": f"labels/{name}.png",
        "area_pct": round(truth.area_fraction, 4),
    }


def generate_dataset(model: SensorModel, protocol: DatasetProtocol, root: Union[str, Path]) -> Dict[str, Any]:
    """
    Render and write a whole dataset.

    Frames may render concurrently; files and manifest entries are written in index order.

    Args:
        model: Sensor model
        protocol: Dataset protocol
        root: Output directory

    Returns:
        The manifest written to <root>/manifest.json

    Raises:
        DatasetIOError: On write failures
        SpecError: If a protocol shape cannot be placed
    """
    root = Path(root)
    scenes = build_scenes(model, protocol)
    logger.info(f"Generating {len(scenes)} frames into {root} ({protocol.workers} workers)")

    def render(item: Tuple[int, SceneSpec]):
        index, scene = item
        return render_frame(model, scene, index=index)

    entries: List[Dict[str, Any]] = []
    for (index, scene), (frame, truth) in zip(
        enumerate(scenes), map_ordered(render, enumerate(scenes), workers=protocol.workers)
    ):
        entries.append(write_sample(root, index, frame, truth, scene))
        if (index + 1) % 100 == 0:
            logger.debug(f"Wrote {index + 1}/{len(scenes)} frames")

    manifest = {
        "v": SCHEMA_VERSION,
        "model": model.to_dict(),
        "protocol": protocol.to_dict(),
        "seed": protocol.seed,
        "count": len(entries),
        "splits": split_indices(len(entries), protocol.split, protocol.seed),
        "frames": entries,
    }
    write_json(root / "manifest.json", manifest)
    sizes = "/".join(str(len(v)) for v in manifest["splits"].values())
    logger.info(f"Dataset written: {len(entries)} frames, train/val/test {sizes}")
    return manifest
