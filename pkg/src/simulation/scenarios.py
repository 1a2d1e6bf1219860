"""
Scripted frame sequences.

A scenario is a JSON document of phases; each phase repeats one contact shape for a
number of frames while numeric parameters ramp linearly between a start and an end
value. Scenarios drive `simulate`, `run --input <scenario.json>` and `bench`.

Example:
    {"name": "press", "seed": 1,
     "phases": [{"frames": 5, "shape": "none"},
                {"frames": 20, "shape": "circle", "size_mm": 6,
                 "shear_mm": [[0, 0], [0.8, 0]]}]}
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from src.config import SCHEMA_VERSION
from src.core.imaging import Frame
from src.simulation.dataset import write_sample
from src.simulation.renderer import render_frame
from src.simulation.sensor import ContactRegion, GroundTruth, SceneSpec, SensorModel, SlipPatch
from src.utils.error_handling import ApplicationError, ScenarioError
from src.utils.export_utils import read_json, write_json

# Set up logging
logger = logging.getLogger(__name__)

# Phase keys that may ramp: scalars as [start, end], vectors as [[x0, y0], [x1, y1]]
_SCALAR_RAMPS = ("size_mm", "aspect", "rotation_deg", "depth_mm", "twist_deg")
_VECTOR_RAMPS = ("center_mm", "shear_mm", "uniform_shift_mm")
_STATIC_KEYS = ("shape", "vertices_mm", "slip_patch", "hidden_markers")
_PHASE_KEYS = ("name", "frames") + _SCALAR_RAMPS + _VECTOR_RAMPS + _STATIC_KEYS


def _ramp_endpoints(key: str, value: Any) -> Tuple[np.ndarray, np.ndarray]:
    array = np.asarray(value, dtype=np.float64)
    if key in _SCALAR_RAMPS:
        if array.ndim == 0:
            return array, array
        if array.shape == (2,):
            return array[0], array[1]
    else:
        if array.shape == (2,):
            return array, array
        if array.shape == (2, 2):
            return array[0], array[1]
    raise ScenarioError(f"Phase value '{key}' has an invalid shape {array.shape}")


@dataclass(frozen=True)
class Phase:
    frames: int
    values: Dict[str, Any] = field(default_factory=dict)
    name: str = ""

    def scene_at(self, step: int, seed: int) -> SceneSpec:
        """Scene for the step-th frame of the phase; ramps reach their end value on the last frame."""
        t = step / (self.frames - 1) if self.frames > 1 else 0.0
        kwargs: Dict[str, Any] = {"seed": seed}
        for key, value in self.values.items():
            if key in _SCALAR_RAMPS:
                start, end = _ramp_endpoints(key, value)
                kwargs[key] = float(start + (end - start) * t)
            elif key in _VECTOR_RAMPS:
                start, end = _ramp_endpoints(key, value)
                point = start + (end - start) * t
                kwargs[key] = (float(point[0]), float(point[1]))
            elif key == "slip_patch":
                kwargs[key] = SlipPatch.from_dict(value) if value is not None else None
            else:
                kwargs[key] = value
        return SceneSpec(**kwargs)


@dataclass(frozen=True)
class Scenario:
    name: str
    phases: Tuple[Phase, ...]
    sensor: SensorModel = SensorModel()
    seed: int = 0

    @property
    def frame_count(self) -> int:
        return sum(p.frames for p in self.phases)

    def scenes(self) -> Iterator[SceneSpec]:
        index = 0
        for phase in self.phases:
            for step in range(phase.frames):
                yield phase.scene_at(step, self.seed + index)
                index += 1

    def frames(self) -> Iterator[Tuple[Frame, GroundTruth]]:
        for index, scene in enumerate(self.scenes()):
            yield render_frame(self.sensor, scene, index=index)

    def phase_of(self, index: int) -> str:
        for phase in self.phases:
            if index < phase.frames:
                return phase.name
            index -= phase.frames
        raise IndexError(index)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Scenario":
        if not isinstance(data, dict):
            raise ScenarioError("Scenario must be a JSON object")
        allowed = {"name", "phases", "sensor", "seed", "noise_sigma"}
        unknown = set(data) - allowed
        if unknown:
            raise ScenarioError(f"Unknown scenario keys: {sorted(unknown)}")

        sensor_data = dict(data.get("sensor") or {})
        if "noise_sigma" in data:
            sensor_data["noise_sigma"] = data["noise_sigma"]

        phases: List[Phase] = []
        for i, raw in enumerate(data.get("phases") or []):
            if not isinstance(raw, dict):
                raise ScenarioError(f"Phase {i} must be an object")
            unknown = set(raw) - set(_PHASE_KEYS)
            if unknown:
                raise ScenarioError(f"Unknown keys in phase {i}: {sorted(unknown)}")
            frames = raw.get("frames")
            if not isinstance(frames, int) or frames < 1:
                raise ScenarioError(f"Phase {i} needs a positive integer 'frames'")
            values = {k: v for k, v in raw.items() if k not in ("name", "frames")}
            for key in _SCALAR_RAMPS + _VECTOR_RAMPS:
                if key in values:
                    _ramp_endpoints(key, values[key])
            phases.append(Phase(frames=frames, values=values, name=str(raw.get("name", f"phase{i}"))))
        if not phases:
            raise ScenarioError("Scenario has no phases")

        try:
            scenario = cls(
                name=str(data.get("name", "scenario")),
                phases=tuple(phases),
                sensor=SensorModel.from_dict(sensor_data),
                seed=int(data.get("seed", 0)),
            )
            # Reject bad geometry before anything is rendered
            for phase in scenario.phases:
                for step in (0, phase.frames - 1):
                    ContactRegion(scenario.sensor, phase.scene_at(step, 0))
        except ScenarioError:
            raise
        except (ApplicationError, TypeError, ValueError) as e:
            raise ScenarioError(f"Invalid scenario: {e}")
        return scenario


def load_scenario(path: Union[str, Path]) -> Scenario:
    """
    Raises:
        ScenarioError: If the file cannot be read or parsed
    """
    try:
        data = read_json(path)
    except (OSError, ValueError) as e:
        raise ScenarioError(f"Could not read scenario {path}: {e}", {"path": str(path)})
    scenario = Scenario.from_dict(data)
    logger.info(f"Loaded scenario '{scenario.name}': {len(scenario.phases)} phases, {scenario.frame_count} frames")
    return scenario


def write_scenario(scenario: Scenario, root: Union[str, Path]) -> Dict[str, Any]:
    """Render a scenario to disk in the dataset layout; returns the manifest."""
    root = Path(root)
    entries = []
    for (frame, truth), scene in zip(scenario.frames(), scenario.scenes()):
        entry = write_sample(root, frame.index, frame, truth, scene)
        entry["phase"] = scenario.phase_of(frame.index)
        entry["slip"] = truth.slip
        entries.append(entry)
    manifest = {
        "v": SCHEMA_VERSION,
        "scenario": scenario.name,
        "model": scenario.sensor.to_dict(),
        "seed": scenario.seed,
        "count": len(entries),
        "frames": entries,
    }
    write_json(root / "manifest.json", manifest)
    logger.info(f"Scenario '{scenario.name}' rendered: {len(entries)} frames in {root}")
    return manifest


def find_scenario_source(path: Union[str, Path]) -> Optional[Scenario]:
    """Scenario if the path is a scenario JSON file, else None."""
    path = Path(path)
    if path.is_file() and path.suffix.lower() == ".json":
        return load_scenario(path)
    return None


# Default `bench` workload: rest, press, shear with twist, then a slipping patch
BENCHMARK_SCENARIO: Dict[str, Any] = {
    "name": "benchmark",
    "seed": 7,
    "noise_sigma": 1.5,
    "phases": [
        {"name": "rest", "frames": 5, "shape": "none"},
        {"name": "press", "frames": 8, "shape": "circle", "size_mm": [2.0, 6.5], "depth_mm": [0.2, 0.6]},
        {"name": "shear", "frames": 8, "shape": "circle", "size_mm": 6.5, "depth_mm": 0.6,
         "shear_mm": [[0.0, 0.0], [0.5, 0.2]], "twist_deg": [0.0, 2.0]},
        {"name": "slip", "frames": 3, "shape": "circle", "size_mm": 6.5, "depth_mm": 0.6,
         "shear_mm": [0.5, 0.2], "twist_deg": 2.0,
         "slip_patch": {"center_mm": [0.0, 0.0], "half_extents_mm": [4.5, 2.0], "offset_px": [7.0, 0.0]}},
    ],
}


def benchmark_scenario() -> Scenario:
    return Scenario.from_dict(BENCHMARK_SCENARIO)
