"""
Application metadata and default locations.
"""

import os
from pathlib import Path

APP_NAME = "shred-sensing"
APP_VERSION = "1.0.0"

DEFAULT_OUTPUT_ROOT = Path("runs")
DEFAULT_CONFIG_PATH = Path("config.json")


def output_root() -> Path:
    """Default output root: $SHRED_OUT when set, otherwise ./runs."""
    return Path(os.environ.get("SHRED_OUT") or DEFAULT_OUTPUT_ROOT)
