"""
Integration tests for the `viko` command line.
"""

import io
import json
import logging
from pathlib import Path

import pytest

from src.__main__ import EXIT_TARGET_MISSED, main
from src.simulation.renderer import render_frame
from src.simulation.sensor import SceneSpec

TINY_SCENARIO = {
    "name": "tiny",
    "seed": 1,
    "phases": [
        {"name": "rest", "frames": 5, "shape": "none"},
        {"name": "press", "frames": 3, "shape": "circle", "size_mm": [3.0, 5.0], "depth_mm": 0.5},
    ],
}


@pytest.fixture(autouse=True)
def restore_logging():
    """main() reconfigures the package logger; undo it after each test."""
    yield
    logger = logging.getLogger("src")
    for handler in list(logger.handlers):
        handler.close()
        logger.removeHandler(handler)
    logger.propagate = True
    logger.setLevel(logging.NOTSET)


@pytest.fixture
def scenario_file(temp_dir):
    path = Path(temp_dir) / "tiny.json"
    path.write_text(json.dumps(TINY_SCENARIO))
    return path


def _lines(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


class TestSimulateAndRun:
    """Tests for rendering a scenario and processing it."""

    def test_simulate_then_run_directory(self, scenario_file, temp_dir):
        rendered = Path(temp_dir) / "rendered"
        assert main(["simulate", "--scenario", str(scenario_file), "--out", str(rendered)]) == 0
        assert json.loads((rendered / "manifest.json").read_text())["count"] == 8

        out = Path(temp_dir) / "out.jsonl"
        assert main(["run", "--input", str(rendered / "frames"), "--out", str(out)]) == 0
        records = _lines(out)
        assert len(records) == 8
        assert records[0]["area_pct"] == 0.0
        assert records[-1]["area_pct"] > 0.0

    def test_run_scenario_to_stdout(self, scenario_file, capsys):
        assert main(["run", "--input", str(scenario_file)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 8
        assert json.loads(lines[0])["v"] == 1

    def test_run_with_fps_report(self, scenario_file, temp_dir, capsys):
        out = Path(temp_dir) / "out.jsonl"
        assert main(["run", "--input", str(scenario_file), "--out", str(out), "--fps-report"]) == 0
        assert capsys.readouterr().out.startswith("frames=8 ")
        assert all(r["timing_us"]["total"] > 0 for r in _lines(out))

    def test_default_run_is_byte_identical(self, scenarios_dir, temp_dir):
        """Two runs with the shipped defaults write the same bytes."""
        scenario = scenarios_dir / "egg_sequence.json"
        first, second = Path(temp_dir) / "a.jsonl", Path(temp_dir) / "b.jsonl"
        assert main(["run", "--input", str(scenario), "--out", str(first)]) == 0
        assert main(["run", "--input", str(scenario), "--out", str(second)]) == 0
        assert first.read_bytes() == second.read_bytes()
        assert all(v == 0 for r in _lines(first) for v in r["timing_us"].values())

    def test_run_raw_stdin(self, sensor_model, monkeypatch, temp_dir):
        frame, _ = render_frame(sensor_model, SceneSpec())
        payload = frame.data.tobytes() * 6
        monkeypatch.setattr("sys.stdin", io.TextIOWrapper(io.BytesIO(payload)))
        out = Path(temp_dir) / "out.jsonl"
        assert main(["run", "--input", "-", "--out", str(out)]) == 0
        assert [r["frame"] for r in _lines(out)] == list(range(6))

    def test_run_with_config_and_reference(self, scenario_file, temp_dir, reference_frame):
        from src.utils.frame_io import save_frame

        reference = save_frame(Path(temp_dir) / "ref.png", reference_frame)
        config = Path(temp_dir) / "viko.toml"
        config.write_text("[output]\nstride = 2\ninclude_timing = false\n")
        out = Path(temp_dir) / "out.jsonl"
        assert main(["run", "--input", str(scenario_file), "--config", str(config),
                     "--reference", str(reference), "--out", str(out)]) == 0
        records = _lines(out)
        assert [r["frame"] for r in records] == [0, 2, 4, 6]
        assert "timing_us" not in records[0]

    def test_missing_config_is_an_application_error(self, scenario_file, temp_dir):
        assert main(["run", "--input", str(scenario_file), "--config", str(Path(temp_dir) / "nope.toml")]) == 2

    def test_bad_scenario_is_an_application_error(self, temp_dir):
        path = Path(temp_dir) / "bad.json"
        path.write_text(json.dumps({"phases": [{"frames": 2, "shape": "blob"}]}))
        assert main(["simulate", "--scenario", str(path), "--out", str(Path(temp_dir) / "x")]) == 2


class TestDatasetCommand:
    def test_small_protocol(self, temp_dir):
        protocol = Path(temp_dir) / "protocol.json"
        protocol.write_text(json.dumps({"shapes": ["circle", "hexagon"], "count_per_shape": 2}))
        out = Path(temp_dir) / "dataset"
        assert main(["dataset", "--protocol", str(protocol), "--out", str(out), "--seed", "5", "--workers", "2"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["count"] == 4
        assert manifest["seed"] == 5


class TestCalibrateCommand:
    """Tests for fitting a calibration from the command line."""

    def test_fit_and_print(self, temp_dir, capsys):
        samples = Path(temp_dir) / "samples.csv"
        rows = [(x / 10.0, 2.344 * x / 10 - 0.1363 * (x / 10) ** 2 - 0.06845 * (x / 10) ** 3) for x in range(1, 21)]
        samples.write_text("x,force\n" + "\n".join(f"{x},{f}" for x, f in rows) + "\n")
        out = Path(temp_dir) / "cal.json"

        assert main(["calibrate", "--samples", str(samples), "--out", str(out)]) == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed["coeffs"] == pytest.approx([2.344, -0.1363, -0.06845], abs=1e-6)
        assert json.loads(out.read_text())["coeffs"] == printed["coeffs"]

    def test_degenerate_samples(self, temp_dir):
        samples = Path(temp_dir) / "samples.csv"
        samples.write_text("1.0,2.0\n1.0,2.0\n1.0,2.0\n")
        assert main(["calibrate", "--samples", str(samples), "--out", str(Path(temp_dir) / "cal.json")]) == 2


class TestBenchCommand:
    """Tests for the throughput benchmark command."""

    def test_report_and_pass(self, temp_dir, capsys):
        report_path = Path(temp_dir) / "bench.json"
        code = main(["bench", "--frames", "12", "--target-fps", "0.01", "--report", str(report_path)])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["frames"] == 12
        assert report["passed"] is True
        assert json.loads(report_path.read_text())["frames"] == 12

    def test_missed_target(self):
        assert main(["bench", "--frames", "6", "--target-fps", "1e9"]) == EXIT_TARGET_MISSED

    def test_invalid_frame_count(self):
        assert main(["bench", "--frames", "0"]) == 2


class TestDemoCommand:
    """Tests for the closed-loop demo command."""

    def test_egg_demo_passes(self, scenarios_dir, temp_dir, capsys):
        out = Path(temp_dir) / "demo"
        assert main(["demo", "--scenario", str(scenarios_dir / "egg_grasp.json"), "--out", str(out)]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["passed"] is True
        assert (out / "trace.csv").exists()

    def test_failed_grasp_exit_code(self, temp_dir):
        path = Path(temp_dir) / "small.json"
        path.write_text(json.dumps({"name": "pebble", "angle_area": [[0, 5.0], [90, 8.0]], "lift_frames": 4}))
        assert main(["demo", "--scenario", str(path), "--out", str(Path(temp_dir) / "demo")]) == EXIT_TARGET_MISSED


class TestParser:
    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "Viko Contact" in capsys.readouterr().out

    def test_command_is_required(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2
