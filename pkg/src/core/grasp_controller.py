"""
Closed-loop grasp controller driven by contact reports.

The controller approaches an object, re-approaches at a larger contact angle while the
contact area is too small, lifts, tightens its grip whenever incipient slip is reported
and releases on command. run_demo plays the loop against the simulator.
"""

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum, auto
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from src.config import TARGET_FPS
from src.core.pipeline import ContactReport, PipelineConfig, PipelineState, SensorConfig, init_reference, process_frame
from src.simulation.renderer import render_frame
from src.simulation.sensor import SceneSpec, SensorModel, SlipPatch
from src.utils.error_handling import ConfigurationError, ScenarioError
from src.utils.export_utils import read_json, write_csv, write_json

# Set up logging
logger = logging.getLogger(__name__)

TRACE_HEADER = ("t", "state", "area_pct", "shear_mag", "slip", "grip_force")


class GraspState(Enum):
    APPROACH = auto()
    ADJUST = auto()
    LIFT = auto()
    TIGHTEN = auto()
    RELEASE = auto()
    GRASP_FAILED = auto()

    @property
    def is_terminal(self) -> bool:
        return self in (GraspState.RELEASE, GraspState.GRASP_FAILED)


class Action(Enum):
    NONE = auto()
    ADJUST_ANGLE = auto()
    APPROACH = auto()
    LIFT = auto()
    TIGHTEN = auto()
    RELEASE = auto()


# Legal transitions, staying put included
TRANSITIONS = {
    GraspState.APPROACH: {GraspState.APPROACH, GraspState.ADJUST, GraspState.LIFT, GraspState.GRASP_FAILED},
    GraspState.ADJUST: {GraspState.APPROACH},
    GraspState.LIFT: {GraspState.LIFT, GraspState.TIGHTEN, GraspState.RELEASE},
    GraspState.TIGHTEN: {GraspState.LIFT},
    GraspState.RELEASE: {GraspState.RELEASE},
    GraspState.GRASP_FAILED: {GraspState.GRASP_FAILED},
}


@dataclass(frozen=True)
class GraspPolicy:
    area_accept_threshold: float = 20.0
    max_reapproach: int = 3
    angle_step_deg: float = 10.0
    grip_increment: float = 1.0
    initial_grip: float = 1.0

    def __post_init__(self):
        if self.area_accept_threshold <= 0 or self.angle_step_deg <= 0 or self.grip_increment <= 0:
            raise ConfigurationError("Grasp policy thresholds and steps must be positive")
        if self.max_reapproach < 1:
            raise ConfigurationError(f"max_reapproach must be >= 1, got {self.max_reapproach}")

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "GraspPolicy":
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"Unknown policy keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class ControllerState:
    state: GraspState = GraspState.APPROACH
    angle_deg: float = 0.0
    grip_force: float = 1.0
    reapproaches: int = 0


def step_policy(report: ContactReport, ctl: ControllerState, policy: GraspPolicy = GraspPolicy(),
                place: bool = False) -> Tuple[Action, ControllerState]:
    """
    Advance the controller by one contact report.

    Args:
        report: Report of the latest frame
        ctl: Current controller state
        policy: Thresholds and increments
        place: Place command; releases the object when lifting

    Returns:
        (action, next controller state)
    """
    state = ctl.state
    if state.is_terminal:
        return Action.NONE, ctl

    if state == GraspState.APPROACH:
        if report.area_fraction >= policy.area_accept_threshold:
            return Action.LIFT, replace(ctl, state=GraspState.LIFT)
        if ctl.reapproaches >= policy.max_reapproach:
            logger.warning(f"Contact area {report.area_fraction:.1f}% still below "
                           f"{policy.area_accept_threshold:g}% after {ctl.reapproaches} re-approaches")
            return Action.NONE, replace(ctl, state=GraspState.GRASP_FAILED)
        return Action.ADJUST_ANGLE, replace(
            ctl,
            state=GraspState.ADJUST,
            angle_deg=ctl.angle_deg + policy.angle_step_deg,
            reapproaches=ctl.reapproaches + 1,
        )

    if state == GraspState.ADJUST:
        return Action.APPROACH, replace(ctl, state=GraspState.APPROACH)

    if state == GraspState.TIGHTEN:
        return Action.NONE, replace(ctl, state=GraspState.LIFT)

    # LIFT
    if place:
        return Action.RELEASE, replace(ctl, state=GraspState.RELEASE)
    if report.slip.slip:
        return Action.TIGHTEN, replace(ctl, state=GraspState.TIGHTEN, grip_force=ctl.grip_force + policy.grip_increment)
    return Action.NONE, ctl


# ===== Trace =====

@dataclass(frozen=True)
class TraceSample:
    t: float
    state: GraspState
    area_pct: float
    shear_mag: float
    slip: bool
    grip_force: float

    def to_row(self) -> Tuple[Any, ...]:
        return (f"{self.t:.4f}", self.state.name, f"{self.area_pct:.3f}", f"{self.shear_mag:.4f}",
                int(self.slip), f"{self.grip_force:g}")


@dataclass
class GraspTrace:
    samples: List[TraceSample] = field(default_factory=list)

    def append(self, sample: TraceSample) -> None:
        if self.samples and sample.t < self.samples[-1].t:
            raise ValueError("Trace samples must be in time order")
        self.samples.append(sample)

    def states(self) -> List[GraspState]:
        return [s.state for s in self.samples]

    def count(self, state: GraspState) -> int:
        return sum(1 for s in self.samples if s.state == state)

    def is_legal(self) -> bool:
        states = self.states()
        return all(b in TRANSITIONS[a] for a, b in zip(states, states[1:]))

    def write_csv(self, path: Union[str, Path]) -> Path:
        return write_csv(path, TRACE_HEADER, (s.to_row() for s in self.samples))

    def to_list(self) -> List[Dict[str, Any]]:
        return [
            {"t": round(s.t, 4), "state": s.state.name, "area_pct": round(s.area_pct, 3),
             "shear_mag": round(s.shear_mag, 4), "slip": s.slip, "grip_force": s.grip_force}
            for s in self.samples
        ]


# ===== Demo scenario =====

@dataclass(frozen=True)
class Disturbance:
    """External pull during lifting: slippage of a marker patch until the grip is firm enough."""

    start: int
    frames: int = 10
    grip_required: float = 2.0
    offset_px: Tuple[float, float] = (7.0, 0.0)
    patch_center_mm: Tuple[float, float] = (0.0, 0.0)
    patch_half_extents_mm: Tuple[float, float] = (4.5, 2.0)
    area_drop_pct: float = 0.0

    def active(self, lift_step: int) -> bool:
        return self.start <= lift_step < self.start + self.frames

    def patch(self) -> SlipPatch:
        return SlipPatch(center_mm=self.patch_center_mm, half_extents_mm=self.patch_half_extents_mm,
                         offset_px=self.offset_px)


@dataclass(frozen=True)
class DemoScenario:
    """
    Closed-loop scenario.

    angle_area maps contact angle (degrees) to contact area (percent of the sensing
    area); values between table entries are interpolated linearly.
    """

    name: str = "egg"
    angle_area: Tuple[Tuple[float, float], ...] = ((0.0, 18.0), (10.0, 22.0))
    initial_angle_deg: float = 0.0
    reference_frames: int = 5
    lift_frames: int = 40
    lift_shear_mm: Tuple[float, float] = (0.0, 0.3)
    depth_mm: float = 0.6
    release_frames: int = 5
    disturbances: Tuple[Disturbance, ...] = ()
    policy: GraspPolicy = GraspPolicy()
    sensor: SensorModel = SensorModel()
    seed: int = 0
    fps: float = TARGET_FPS

    def area_for_angle(self, angle_deg: float) -> float:
        table = np.asarray(self.angle_area, dtype=np.float64)
        return float(np.interp(angle_deg, table[:, 0], table[:, 1]))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DemoScenario":
        if not isinstance(data, dict):
            raise ScenarioError("Demo scenario must be a JSON object")
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__) - {"noise_sigma"}
        if unknown:
            raise ScenarioError(f"Unknown demo scenario keys: {sorted(unknown)}")
        try:
            sensor_data = dict(data.pop("sensor", None) or {})
            if "noise_sigma" in data:
                sensor_data["noise_sigma"] = data.pop("noise_sigma")
            data["sensor"] = SensorModel.from_dict(sensor_data)
            data["policy"] = GraspPolicy.from_dict(data.get("policy"))
            table = sorted((float(a), float(p)) for a, p in data.get("angle_area", cls.angle_area))
            if not table:
                raise ScenarioError("angle_area needs at least one entry")
            data["angle_area"] = tuple(table)
            if "lift_shear_mm" in data:
                data["lift_shear_mm"] = tuple(float(v) for v in data["lift_shear_mm"])
            disturbances = []
            for raw in data.get("disturbances", []):
                raw = dict(raw)
                for key in ("offset_px", "patch_center_mm", "patch_half_extents_mm"):
                    if key in raw:
                        raw[key] = tuple(float(v) for v in raw[key])
                disturbances.append(Disturbance(**raw))
            data["disturbances"] = tuple(disturbances)
            return cls(**data)
        except ScenarioError:
            raise
        except (TypeError, ValueError, ConfigurationError) as e:
            raise ScenarioError(f"Invalid demo scenario: {e}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DemoScenario":
        try:
            data = read_json(path)
        except (OSError, ValueError) as e:
            raise ScenarioError(f"Could not read demo scenario {path}: {e}", {"path": str(path)})
        return cls.from_dict(data)


def _circle_radius_mm(model: SensorModel, area_pct: float) -> float:
    roi = model.sensing_roi()
    radius_px = math.sqrt(max(area_pct, 0.0) / 100.0 * roi.area / math.pi)
    return radius_px / model.px_per_mm


def _scene(scenario: DemoScenario, ctl: ControllerState, lift_step: int, area_drop: float, seed: int) -> SceneSpec:
    """Scene seen by the sensor in the current controller state."""
    if ctl.state in (GraspState.ADJUST, GraspState.RELEASE, GraspState.GRASP_FAILED):
        return SceneSpec(shape="none", seed=seed)

    area = scenario.area_for_angle(ctl.angle_deg)
    shear = (0.0, 0.0)
    patch = None
    if ctl.state in (GraspState.LIFT, GraspState.TIGHTEN):
        area = max(area - area_drop, 0.0)
        ramp = min(lift_step / max(scenario.lift_frames // 4, 1), 1.0)
        shear = (scenario.lift_shear_mm[0] * ramp, scenario.lift_shear_mm[1] * ramp)
        for disturbance in scenario.disturbances:
            if disturbance.active(lift_step) and ctl.grip_force < disturbance.grip_required:
                patch = disturbance.patch()
                break

    return SceneSpec(shape="circle", size_mm=_circle_radius_mm(scenario.sensor, area), depth_mm=scenario.depth_mm,
                     shear_mm=shear, slip_patch=patch, seed=seed)


@dataclass
class DemoResult:
    trace: GraspTrace
    final_state: GraspState
    adjustments: int
    tightenings: int

    @property
    def passed(self) -> bool:
        return self.final_state == GraspState.RELEASE and GraspState.GRASP_FAILED not in self.trace.states()

    def summary(self) -> Dict[str, Any]:
        return {
            "passed": self.passed,
            "final_state": self.final_state.name,
            "adjustments": self.adjustments,
            "tightenings": self.tightenings,
            "frames": len(self.trace.samples),
            "max_grip_force": max((s.grip_force for s in self.trace.samples), default=0.0),
        }


def run_demo(scenario: DemoScenario, policy: Optional[GraspPolicy] = None,
             cfg: Optional[PipelineConfig] = None, out_dir: Optional[Union[str, Path]] = None) -> DemoResult:
    """
    Play the grasp loop against the simulator.

    Args:
        scenario: Object, angle/area table and disturbance schedule
        policy: Controller policy (defaults to the scenario's)
        cfg: Pipeline configuration (defaults matched to the scenario sensor)
        out_dir: Directory for trace.csv and trace.json

    Returns:
        DemoResult; passed iff the loop ended in RELEASE without GRASP_FAILED
    """
    policy = policy or scenario.policy
    model = scenario.sensor
    if cfg is None:
        cfg = PipelineConfig(sensor=SensorConfig(width=model.width, height=model.height, px_per_mm=model.px_per_mm,
                                                 roi_border_px=model.roi_border_px,
                                                 expected_markers=model.marker_count))

    reference_frames = [render_frame(model, SceneSpec(seed=scenario.seed + i), index=i)[0]
                        for i in range(scenario.reference_frames)]
    ref, markers = init_reference(reference_frames, cfg)
    pipeline = PipelineState.create(ref, markers, cfg)

    trace = GraspTrace()
    ctl = ControllerState(angle_deg=scenario.initial_angle_deg, grip_force=policy.initial_grip)
    index = scenario.reference_frames
    lift_step = 0
    area_drop = 0.0
    released = 0
    adjustments = tightenings = 0
    max_frames = (policy.max_reapproach + 1) * 2 + scenario.lift_frames * 2 + scenario.release_frames + 10

    try:
        while index < scenario.reference_frames + max_frames:
            scene = _scene(scenario, ctl, lift_step, area_drop, scenario.seed + index)
            frame, _ = render_frame(model, scene, index=index)
            report = process_frame(frame, pipeline, cfg)

            lifting = ctl.state in (GraspState.LIFT, GraspState.TIGHTEN)
            action, ctl = step_policy(report, ctl, policy, place=lifting and lift_step >= scenario.lift_frames)
            if action == Action.ADJUST_ANGLE:
                adjustments += 1
                logger.info(f"Contact area {report.area_fraction:.1f}% too small; re-approaching at {ctl.angle_deg:g} deg")
            elif action == Action.TIGHTEN:
                tightenings += 1
                logger.info(f"Incipient slip at lift step {lift_step}; grip force -> {ctl.grip_force:g}")
            elif action == Action.LIFT:
                logger.info(f"Grasp accepted at {report.area_fraction:.1f}% contact area")

            trace.append(TraceSample(
                t=index / scenario.fps,
                state=ctl.state,
                area_pct=report.area_fraction,
                shear_mag=report.shear.magnitude,
                slip=report.slip.slip,
                grip_force=ctl.grip_force,
            ))
            index += 1

            if lifting:
                for disturbance in scenario.disturbances:
                    if lift_step == disturbance.start:
                        area_drop += disturbance.area_drop_pct
                lift_step += 1
            if ctl.state == GraspState.GRASP_FAILED:
                break
            if ctl.state == GraspState.RELEASE:
                released += 1
                if released > scenario.release_frames:
                    break
    finally:
        pipeline.close()

    result = DemoResult(trace=trace, final_state=ctl.state, adjustments=adjustments, tightenings=tightenings)
    logger.info(f"Demo '{scenario.name}' finished in {ctl.state.name}: {result.summary()}")

    if out_dir is not None:
        out = Path(out_dir)
        trace.write_csv(out / "trace.csv")
        write_json(out / "trace.json", {"scenario": scenario.name, "policy": asdict(policy),
                                        "summary": result.summary(), "trace": trace.to_list()})
    return result
