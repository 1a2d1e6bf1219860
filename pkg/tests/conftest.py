"""
Configuration and fixtures for pytest.
"""

import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

# Ensure src is in the Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

# Import application modules
from src.core.pipeline import PipelineConfig
from src.simulation.renderer import render_frame
from src.simulation.sensor import SceneSpec, SensorModel


@pytest.fixture
def temp_dir():
    """Create a temporary directory for testing."""
    temp_dir = tempfile.mkdtemp()
    yield temp_dir
    # Clean up after the test
    shutil.rmtree(temp_dir)


@pytest.fixture
def scenarios_dir():
    """Return the path to the bundled scenario files."""
    return project_root / "scenarios"


@pytest.fixture
def sensor_model():
    """Default 480x480 sensor with a 10x10 marker grid, noise-free."""
    return SensorModel()


@pytest.fixture
def noisy_sensor_model():
    """Default sensor with camera noise of sigma 2."""
    return SensorModel(noise_sigma=2.0)


@pytest.fixture
def pipeline_config():
    """Default pipeline configuration."""
    return PipelineConfig()


@pytest.fixture
def reference_frame(sensor_model):
    """Clean no-contact frame."""
    frame, _ = render_frame(sensor_model, SceneSpec(shape="none"), index=0)
    return frame


@pytest.fixture
def render(sensor_model):
    """Render a scene on the default sensor: render(shape=..., **scene_kwargs) -> (Frame, GroundTruth)."""
    def _render(index: int = 1, model: SensorModel = None, **scene_kwargs):
        return render_frame(model or sensor_model, SceneSpec(**scene_kwargs), index=index)
    return _render


@pytest.fixture
def grid_points(sensor_model):
    """Rest positions of the 10x10 marker grid in pixels."""
    return sensor_model.marker_positions()


@pytest.fixture
def rng():
    """Seeded random generator."""
    return np.random.default_rng(1234)
