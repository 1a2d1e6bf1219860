"""
Tests for configuration loading and logging setup.
"""

import json
import logging
from pathlib import Path

import pytest

from src.config import load_config_document, setup_logging
from src.core.pipeline import PipelineConfig
from src.core.shear import ShearCalibration
from src.utils.error_handling import CalibrationError, ConfigurationError

project_root = Path(__file__).parent.parent


class TestLoadConfigDocument:
    """Tests for reading TOML and JSON documents."""

    def test_toml(self, temp_dir):
        path = Path(temp_dir) / "viko.toml"
        path.write_text('workers = 2\n[sensor]\nwidth = 320\n')
        assert load_config_document(path) == {"workers": 2, "sensor": {"width": 320}}

    def test_json(self, temp_dir):
        path = Path(temp_dir) / "viko.json"
        path.write_text(json.dumps({"slip": {"count_threshold": 4}}))
        assert load_config_document(path)["slip"]["count_threshold"] == 4

    def test_missing_file(self, temp_dir):
        with pytest.raises(ConfigurationError, match="not found"):
            load_config_document(Path(temp_dir) / "absent.toml")

    def test_malformed_file(self, temp_dir):
        path = Path(temp_dir) / "bad.toml"
        path.write_text("[sensor\nwidth = ")
        with pytest.raises(ConfigurationError):
            load_config_document(path)

    def test_top_level_must_be_a_mapping(self, temp_dir):
        path = Path(temp_dir) / "list.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigurationError):
            load_config_document(path)


class TestPipelineConfig:
    """Tests for building the pipeline configuration."""

    def test_empty_document_gives_defaults(self):
        cfg = PipelineConfig.from_dict({})
        assert cfg == PipelineConfig()
        assert cfg.max_match_distance_px == pytest.approx(20.0)
        assert cfg.sensor.sensing_roi().area == 211600

    def test_bundled_file_matches_defaults(self):
        cfg = PipelineConfig.load(project_root / "viko.toml")
        assert cfg.to_dict() == PipelineConfig().to_dict()

    def test_to_dict_round_trip(self):
        cfg = PipelineConfig.from_dict({"slip": {"count_threshold": 4}, "output": {"stride": 2}, "workers": 3})
        assert PipelineConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("document", [
        {"camera": {}},
        {"sensor": {"depth": 3}},
        {"slip": {"residual_threshold_px": -1}},
        {"workers": 0},
        {"workers": "many"},
        {"sensor": {"roi": [400, 400, 200, 200]}},
        {"reference": {"source": "file"}},
        {"output": {"stride": 0}},
    ])
    def test_invalid_documents(self, document):
        with pytest.raises(ConfigurationError):
            PipelineConfig.from_dict(document)

    def test_calibration_path_is_relative_to_config(self, temp_dir):
        ShearCalibration(coeffs=(2.0, -0.1, -0.05), valid_range=(0.0, 2.0)).save(Path(temp_dir) / "cal.json")
        path = Path(temp_dir) / "viko.toml"
        path.write_text('[calibration]\npath = "cal.json"\n')
        cfg = PipelineConfig.load(path)
        assert cfg.calibration.coeffs == (2.0, -0.1, -0.05)

    def test_calibration_path_and_inline_values_conflict(self, temp_dir):
        with pytest.raises(ConfigurationError):
            PipelineConfig.from_dict({"calibration": {"path": "cal.json", "signed": False}}, base_dir=Path(temp_dir))

    def test_non_monotonic_inline_calibration(self):
        with pytest.raises(CalibrationError):
            PipelineConfig.from_dict({"calibration": {"coeffs": [1.0, -1.0, 0.0]}})

    def test_external_segmenter_forces_one_worker(self, temp_dir):
        cfg = PipelineConfig.from_dict({"workers": 4, "segmenter": {
            "kind": "external", "external": {"mode": "file", "exchange_dir": temp_dir}}})
        assert cfg.effective_workers() == 1


class TestSetupLogging:
    def test_file_handler(self, temp_dir):
        log_file = Path(temp_dir) / "logs" / "viko.log"
        logger = setup_logging(logging.DEBUG, log_file)
        try:
            logger.info("hello")
            for handler in logger.handlers:
                handler.flush()
            assert "hello" in log_file.read_text()
        finally:
            for handler in list(logger.handlers):
                handler.close()
                logger.removeHandler(handler)
            logger.propagate = True
            logger.setLevel(logging.NOTSET)
