"""
Integration tests for the per-frame contact pipeline.
"""

import json
import sys
import textwrap
from pathlib import Path

import numpy as np
import pytest

from src.core.pipeline import (
    OutputConfig,
    PipelineConfig,
    PipelineState,
    init_reference,
    process_frame,
    report_to_json,
    run_benchmark,
    run_sequence,
)
from src.core.segmentation import ExternalParams, SegmenterConfig
from src.services.segmentation_service import encode_png
from src.simulation.renderer import render_frame
from src.simulation.scenarios import Scenario, benchmark_scenario, load_scenario
from src.simulation.sensor import SceneSpec, SensorModel, SlipPatch
from src.utils.error_handling import InitializationError, InputError

SLIP_PATCH = SlipPatch(half_extents_mm=(4.5, 2.0), offset_px=(7.0, 0.0))

# Answers a fixed number of requests with an empty mask, then dies without replying
SHORT_LIVED_MODEL = textwrap.dedent(
    """
    import os
    import struct
    import sys

    payload = open(sys.argv[1], "rb").read()
    answered = 0
    while True:
        header = sys.stdin.buffer.read(4)
        if len(header) < 4:
            break
        (length,) = struct.unpack(">I", header)
        sys.stdin.buffer.read(length)
        if answered == int(sys.argv[2]):
            os._exit(1)
        sys.stdout.buffer.write(struct.pack(">I", len(payload)) + payload)
        sys.stdout.buffer.flush()
        answered += 1
    """
)


@pytest.fixture
def deterministic_config():
    return PipelineConfig(output=OutputConfig(deterministic=True))


@pytest.fixture
def pipeline_state(reference_frame, pipeline_config):
    ref, markers = init_reference([reference_frame], pipeline_config)
    state = PipelineState.create(ref, markers, pipeline_config)
    yield state
    state.close()


def _read_lines(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


class TestInitReference:
    """Tests for establishing the no-contact reference."""

    def test_averages_frames(self, noisy_sensor_model, pipeline_config):
        frames = [render_frame(noisy_sensor_model, SceneSpec(seed=s), index=s)[0] for s in range(5)]
        ref, markers = init_reference(frames, pipeline_config)
        assert len(markers) == 100
        assert ref.index == 0
        # Averaging five frames reduces the noise on the background
        assert np.std(ref.data[0:8, 0:8].astype(float)) < np.std(frames[0].data[0:8, 0:8].astype(float))

    def test_no_frames(self, pipeline_config):
        with pytest.raises(InitializationError):
            init_reference([], pipeline_config)

    def test_contact_in_reference(self, render, reference_frame, pipeline_config):
        pressed, _ = render(shape="circle", size_mm=4.0)
        with pytest.raises(InitializationError, match="contact"):
            init_reference([reference_frame, pressed, reference_frame], pipeline_config)

    def test_too_few_markers(self, render, pipeline_config):
        frame, _ = render(hidden_markers=tuple(range(20)))
        with pytest.raises(InitializationError, match="markers"):
            init_reference([frame], pipeline_config)

    def test_frames_of_different_sizes(self, reference_frame, pipeline_config):
        small, _ = render_frame(SensorModel(width=440, height=440), SceneSpec())
        with pytest.raises(InputError):
            init_reference([reference_frame, small], pipeline_config)


class TestProcessFrame:
    """Tests for single-frame processing."""

    def test_no_contact(self, render, pipeline_state, pipeline_config):
        frame, _ = render(shape="none")
        report = process_frame(frame, pipeline_state, pipeline_config)
        assert report.area_fraction == 0.0
        assert report.contours == []
        assert report.shear.magnitude == 0.0
        assert not report.slip.slip
        assert report.flags == []
        assert report.markers == 100

    def test_contact_with_shear(self, render, pipeline_state, pipeline_config):
        frame, truth = render(shape="circle", size_mm=6.0, depth_mm=0.5, shear_mm=(0.4, 0.0))
        report = process_frame(frame, pipeline_state, pipeline_config)
        assert report.area_fraction == pytest.approx(truth.area_fraction, abs=2.0)
        assert report.shear.force[0] > 0
        assert abs(report.shear.force[1]) < 0.1 * report.shear.force[0]
        assert len(report.contours) == 1
        assert not report.slip.slip

    def test_slip_patch_is_detected(self, render, pipeline_state, pipeline_config):
        frame, truth = render(shape="circle", size_mm=7.0, depth_mm=0.6, slip_patch=SLIP_PATCH)
        report = process_frame(frame, pipeline_state, pipeline_config)
        assert truth.slip
        assert report.slip.slip
        assert report.slip.outlier_count == 8

    def test_no_slip_without_contact(self, render, pipeline_state, pipeline_config):
        """A displaced marker patch outside any contact is never slip."""
        frame, _ = render(shape="none", slip_patch=SLIP_PATCH)
        report = process_frame(frame, pipeline_state, pipeline_config)
        assert report.area_fraction == 0.0
        assert not report.slip.slip
        assert report.slip.outlier_count == 0

    def test_shear_grows_with_ramp(self, render, pipeline_state, pipeline_config):
        magnitudes = []
        for i, shear in enumerate(np.linspace(0.0, 0.8, 6)):
            frame, _ = render(index=i, shape="circle", size_mm=6.0, depth_mm=0.5, shear_mm=(shear, 0.0))
            magnitudes.append(process_frame(frame, pipeline_state, pipeline_config).shear.magnitude)
        assert all(b > a for a, b in zip(magnitudes, magnitudes[1:]))

    def test_wrong_frame_size_is_flagged(self, pipeline_state, pipeline_config):
        small, _ = render_frame(SensorModel(width=440, height=440), SceneSpec(), index=3)
        report = process_frame(small, pipeline_state, pipeline_config)
        assert report.flags == ["error:InputError"]
        assert report.area_fraction == 0.0
        assert pipeline_state.errors.error_count == 1

    def test_timing_stages_fit_in_total(self, render, pipeline_state, pipeline_config):
        frame, _ = render(shape="circle", size_mm=5.0)
        timing = process_frame(frame, pipeline_state, pipeline_config).timing
        assert set(timing) == {"segmentation", "markers", "matching", "shear", "slip", "total"}
        assert sum(v for k, v in timing.items() if k != "total") <= timing["total"]

    def test_stage_timings_account_for_total(self, scenarios_dir, pipeline_config):
        """Over a full sequence the stages cover at least 95% of the measured total."""
        frames = [frame for frame, _ in load_scenario(scenarios_dir / "egg_sequence.json").frames()]
        ref, markers = init_reference(frames[:5], pipeline_config)
        state = PipelineState.create(ref, markers, pipeline_config)
        stages = total = 0
        try:
            for frame in frames:
                timing = process_frame(frame, state, pipeline_config).timing
                stages += sum(v for k, v in timing.items() if k != "total")
                total += timing["total"]
        finally:
            state.close()
        assert 0.95 * total <= stages <= total

    def test_json_record_layout(self, render, pipeline_state, pipeline_config):
        frame, _ = render(index=12, shape="circle", size_mm=5.0)
        record = report_to_json(process_frame(frame, pipeline_state, pipeline_config))
        assert list(record) == ["v", "frame", "area_pct", "contours", "shear", "slip", "timing_us", "flags"]
        assert record["v"] == 1
        assert record["frame"] == 12
        assert list(record["shear"]) == ["sx", "sy", "mag", "saturated"]
        assert list(record["slip"]) == ["flag", "outliers"]


class TestRunSequence:
    """Tests for whole-stream processing."""

    def test_hundred_no_contact_frames(self, reference_frame, pipeline_config, temp_dir):
        out = Path(temp_dir) / "out.jsonl"
        frames = (reference_frame.with_index(i) for i in range(100))
        assert run_sequence(frames, pipeline_config, out=out) == 0
        records = _read_lines(out)
        assert len(records) == 100
        assert [r["frame"] for r in records] == list(range(100))
        assert all(r["area_pct"] == 0.0 and not r["slip"]["flag"] for r in records)

    def test_deterministic_output_is_byte_identical(self, deterministic_config, temp_dir):
        scenario = Scenario.from_dict({"name": "press", "seed": 2, "noise_sigma": 1.0, "phases": [
            {"frames": 5, "shape": "none"},
            {"frames": 6, "shape": "circle", "size_mm": [3.0, 6.0], "shear_mm": [[0, 0], [0.4, 0.1]]}]})
        frames = [frame for frame, _ in scenario.frames()]
        first, second = Path(temp_dir) / "a.jsonl", Path(temp_dir) / "b.jsonl"
        run_sequence(iter(frames), deterministic_config, out=first)
        parallel = PipelineConfig(output=OutputConfig(deterministic=True), workers=4)
        run_sequence(iter(frames), parallel, out=second)
        assert first.read_bytes() == second.read_bytes()
        assert all(v == 0 for r in _read_lines(first) for v in r["timing_us"].values())

    def test_egg_sequence_slips_only_in_disturbance(self, scenarios_dir, pipeline_config, temp_dir):
        scenario = load_scenario(scenarios_dir / "egg_sequence.json")
        out = Path(temp_dir) / "egg.jsonl"
        run_sequence((frame for frame, _ in scenario.frames()), pipeline_config, out=out)
        records = _read_lines(out)
        assert len(records) == 43
        assert [r["frame"] for r in records if r["slip"]["flag"]] == [25, 26, 27]
        assert all(scenario.phase_of(r["frame"]) == "disturbance" for r in records if r["slip"]["flag"])

    def test_external_model_dying_mid_run_falls_back(self, temp_dir):
        """Frames after the model process dies are segmented by the heuristic and flagged."""
        payload = Path(temp_dir) / "empty.png"
        payload.write_bytes(encode_png(np.zeros((480, 480), dtype=np.uint8)))
        script = Path(temp_dir) / "model.py"
        script.write_text(SHORT_LIVED_MODEL)
        external = ExternalParams(mode="stream", command=(sys.executable, str(script), str(payload), "7"),
                                  timeout_ms=3000)
        cfg = PipelineConfig(segmenter=SegmenterConfig(kind="external", external=external), workers=4)
        scenario = Scenario.from_dict({"name": "press", "seed": 3, "phases": [
            {"frames": 5, "shape": "none"},
            {"frames": 6, "shape": "circle", "size_mm": 5.0, "depth_mm": 0.5}]})

        out = Path(temp_dir) / "out.jsonl"
        assert run_sequence((frame for frame, _ in scenario.frames()), cfg, out=out) == 0
        records = _read_lines(out)
        assert [r["frame"] for r in records] == list(range(11))
        assert all(r["flags"] == [] and r["area_pct"] == 0.0 for r in records[:7])
        assert all(r["flags"] == ["segmenter_degraded"] for r in records[7:])
        assert all(r["area_pct"] > 0.0 for r in records[7:])

    def test_explicit_reference_and_stride(self, reference_frame, render, temp_dir):
        cfg = PipelineConfig(output=OutputConfig(stride=3, include_field=True))
        frames = [render(index=i, shape="circle", size_mm=4.0)[0] for i in range(7)]
        out = Path(temp_dir) / "out.jsonl"
        run_sequence(iter(frames), cfg, out=out, reference=reference_frame)
        records = _read_lines(out)
        assert [r["frame"] for r in records] == [0, 3, 6]
        assert len(records[0]["field"]) == 100

    def test_annotated_frames(self, reference_frame, render, pipeline_config, temp_dir):
        frames = [reference_frame.with_index(0), render(index=1, shape="circle", size_mm=5.0)[0]]
        annotate_dir = Path(temp_dir) / "annotated"
        run_sequence(iter(frames), pipeline_config, out=Path(temp_dir) / "out.jsonl",
                     annotate_dir=annotate_dir, reference=reference_frame)
        assert sorted(p.name for p in annotate_dir.iterdir()) == ["00000.png", "00001.png"]

    def test_empty_stream_cannot_initialise(self, pipeline_config, temp_dir):
        with pytest.raises(InitializationError):
            run_sequence(iter([]), pipeline_config, out=Path(temp_dir) / "out.jsonl")


class TestBenchmark:
    """Throughput over the built-in benchmark scenario."""

    def test_short_run_report(self, pipeline_config):
        frames = [frame for frame, _ in benchmark_scenario().frames()]
        report = run_benchmark(frames, pipeline_config, count=30)
        assert report["frames"] == 30
        assert report["stages"]["total"]["count"] == 30
        assert report["mean_fps"] > 0

    def test_no_frames(self, pipeline_config):
        with pytest.raises(InputError):
            run_benchmark([], pipeline_config)

    @pytest.mark.slow
    def test_sustains_target_rate(self, pipeline_config):
        frames = [frame for frame, _ in benchmark_scenario().frames()]
        report = run_benchmark(frames, pipeline_config, count=500)
        assert report["mean_fps"] >= 24.0
