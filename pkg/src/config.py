"""
Configuration module for Viko Contact.
Defines constants, default sensor geometry, logging setup and config document loading.
"""

import json
import logging
import platform
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, Dict, Optional, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# Application metadata
APP_NAME = "Viko Contact"
APP_VERSION = "1.0.0"
VERSION = APP_VERSION
APP_DESCRIPTION = "Marker-based visuotactile contact pipeline: contact area, shear force and incipient slip"
SCHEMA_VERSION = 1

# System information
SYSTEM_INFO = {
    "os": platform.system(),
    "os_release": platform.release(),
    "python_version": platform.python_version(),
    "architecture": platform.machine(),
}

# Sensor stream defaults
DEFAULT_FRAME_WIDTH = 480
DEFAULT_FRAME_HEIGHT = 480
TARGET_FPS = 24.0

# Marker grid: 10 x 10 dots at 2.5 mm pitch, 30 mm sensing patch imaged at 480 px
GRID_ROWS = 10
GRID_COLS = 10
MARKER_PITCH_MM = 2.5
DEFAULT_PX_PER_MM = 16.0
DEFAULT_DOT_RADIUS_PX = 4.0
DEFAULT_ROI_BORDER_PX = 10

# Shear mapping F_s(x) = c1 x + c2 x^2 + c3 x^3
DEFAULT_SHEAR_COEFFS = (2.344, -0.1363, -0.06845)
DEFAULT_SHEAR_VALID_RANGE = (0.0, 2.5)

# Incipient slip
DEFAULT_SLIP_COUNT_THRESHOLD = 6
DEFAULT_SLIP_RESIDUAL_PX = 3.0

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
FILE_LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(pathname)s:%(lineno)d - %(message)s"


def setup_logging(log_level: int = logging.INFO, log_file: Optional[Union[str, Path]] = None) -> logging.Logger:
    """
    Configure logging for the application with console and optional rotating file output.

    Console output goes to stderr so stdout stays free for the JSON-lines stream.

    Args:
        log_level: The logging level to use (default: logging.INFO)
        log_file: Optional path of a rotating log file

    Returns:
        The package root logger
    """
    logger = logging.getLogger("src")
    logger.setLevel(log_level)

    # Clear existing handlers to avoid duplicates
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(log_level)
    console_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(console_handler)

    if log_file is not None:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(
            log_path,
            maxBytes=10 * 1024 * 1024,  # 10MB max file size
            backupCount=5,
            encoding="utf-8",
        )
        file_handler.setLevel(log_level)
        file_handler.setFormatter(logging.Formatter(FILE_LOG_FORMAT))
        logger.addHandler(file_handler)

    logger.propagate = False
    logger.debug(f"Starting {APP_NAME} v{APP_VERSION}")
    logger.debug(f"System Info: {SYSTEM_INFO}")
    return logger


def load_config_document(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Load a configuration document from a TOML or JSON file.

    Args:
        path: Path to a `.toml` or `.json` file

    Returns:
        The parsed document as a dictionary

    Raises:
        ConfigurationError: If the file is missing, unreadable or not a mapping
    """
    from src.utils.error_handling import ConfigurationError

    config_path = Path(path)
    if not config_path.exists():
        raise ConfigurationError(f"Config file not found: {config_path}", {"path": str(config_path)})

    try:
        if config_path.suffix.lower() == ".toml":
            with config_path.open("rb") as f:
                document = tomllib.load(f)
        else:
            with config_path.open("r", encoding="utf-8") as f:
                document = json.load(f)
    except (OSError, ValueError) as e:
        raise ConfigurationError(f"Could not parse config file {config_path}: {e}", {"path": str(config_path)})

    if not isinstance(document, dict):
        raise ConfigurationError(f"Config file {config_path} must contain a mapping at top level")

    logging.getLogger(__name__).info(f"Configuration loaded from {config_path}")
    return document
