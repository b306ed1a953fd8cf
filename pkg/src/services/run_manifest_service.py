"""
Service for tracking command stages and the files a run produces.
"""

import hashlib
import json
import platform
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional

import matplotlib
import numpy as np
import PIL
import scipy

from resources import APP_NAME, APP_VERSION
from utils.error_handler import DataError
from utils.logger import logger

MANIFEST_NAME = "manifest.json"


class StageStatus(Enum):
    """Status of a run stage."""
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class Stage:
    """One timed stage of a command."""
    name: str
    status: StageStatus
    started_at: str
    seconds: Optional[float] = None
    error_message: Optional[str] = None


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical JSON form of a config."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def library_versions() -> Dict[str, str]:
    return {
        APP_NAME: APP_VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "matplotlib": matplotlib.__version__,
        "pillow": PIL.__version__,
    }


@dataclass
class RunManifest:
    """Config hash, produced files, library versions and stage timings of one command."""
    command: str
    config_hash: str
    output_dir: str
    seed: int
    files: List[str] = field(default_factory=list)
    versions: Dict[str, str] = field(default_factory=library_versions)
    stages: List[Stage] = field(default_factory=list)
    _clock: Dict[str, float] = field(default_factory=dict, repr=False)

    def start_stage(self, name: str) -> Stage:
        """
        Start timing a stage.

        Args:
            name: Stage name

        Returns:
            Stage: The running stage
        """
        stage = Stage(name, StageStatus.RUNNING, datetime.now().isoformat(timespec="seconds"))
        self.stages.append(stage)
        self._clock[name] = time.perf_counter()
        logger.debug(f"Stage {name} started")
        return stage

    def complete_stage(self, name: str, success: bool = True, message: Optional[str] = None):
        """
        Finish a stage started with `start_stage`.

        Args:
            name: Stage name
            success: Whether the stage succeeded
            message: Failure message
        """
        for stage in reversed(self.stages):
            if stage.name == name and stage.status is StageStatus.RUNNING:
                stage.seconds = time.perf_counter() - self._clock.pop(name)
                stage.status = StageStatus.COMPLETED if success else StageStatus.FAILED
                stage.error_message = None if success else message
                logger.info(f"Stage {name} {'completed' if success else 'failed'} in {stage.seconds:.2f} s")
                return

    def add_file(self, path) -> Path:
        """Record a produced file, stored relative to the output directory."""
        path = Path(path)
        try:
            relative = path.resolve().relative_to(Path(self.output_dir).resolve())
        except ValueError:
            relative = path
        if str(relative) not in self.files:
            self.files.append(str(relative))
        return path

    def to_dict(self) -> dict:
        data = asdict(self)
        data.pop("_clock")
        for stage in data["stages"]:
            stage["status"] = stage["status"].value
        return data

    def write(self) -> Path:
        """Write manifest.json into the output directory."""
        path = Path(self.output_dir) / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path

    def missing_files(self) -> List[str]:
        return [name for name in self.files if not (Path(self.output_dir) / name).exists()]

    def verify(self):
        """
        Check that every listed file exists.

        Raises:
            DataError: naming the missing files
        """
        missing = self.missing_files()
        if missing:
            raise DataError(f"manifest lists missing files: {', '.join(missing)}")

    @classmethod
    def load(cls, output_dir) -> "RunManifest":
        path = Path(output_dir) / MANIFEST_NAME
        if not path.exists():
            raise DataError(f"{path}: file not found")
        data = json.loads(path.read_text(encoding="utf-8"))
        stages = [Stage(s["name"], StageStatus(s["status"]), s["started_at"], s["seconds"], s["error_message"])
                  for s in data.pop("stages")]
        manifest = cls(**data)
        manifest.stages = stages
        return manifest
