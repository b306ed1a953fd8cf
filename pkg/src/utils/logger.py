"""
Logging configuration for the application.
"""

import logging
import os
import sys
from pathlib import Path
from datetime import datetime

# Log directory, overridable for sandboxed runs
logs_dir = Path(os.environ.get("SHRED_LOG_DIR", Path.home() / ".shred-sensing" / "logs"))

# Configure logging
logger = logging.getLogger("ShredSensing")
logger.setLevel(logging.DEBUG)
logger.propagate = False

# Create formatters
file_formatter = logging.Formatter(
    "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
console_formatter = logging.Formatter(
    "%(asctime)s - %(levelname)s - %(message)s"
)

# Create console handler
console_handler = logging.StreamHandler(sys.stdout)
console_handler.setLevel(logging.INFO)
console_handler.setFormatter(console_formatter)
logger.addHandler(console_handler)

# Create file handler with timestamp
try:
    logs_dir.mkdir(parents=True, exist_ok=True)
    log_file = logs_dir / f"run_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log"
    file_handler = logging.FileHandler(log_file)
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(file_formatter)
    logger.addHandler(file_handler)
except OSError as e:
    log_file = None
    logger.warning(f"File logging disabled: {str(e)}")


def set_console_level(level: int):
    """
    Change the console verbosity.

    Args:
        level: logging level for the stdout handler
    """
    console_handler.setLevel(level)


# Set exception handling
def handle_exception(exc_type, exc_value, exc_traceback):
    """Handle uncaught exceptions."""
    if issubclass(exc_type, KeyboardInterrupt):
        # Call default handler for keyboard interrupt
        sys.__excepthook__(exc_type, exc_value, exc_traceback)
        return

    logger.critical("Uncaught exception", exc_info=(exc_type, exc_value, exc_traceback))

# Set exception hook
sys.excepthook = handle_exception
