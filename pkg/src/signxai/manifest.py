"""Per-run manifest: configuration, seeds and artifact locations."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .errors import ArtifactIOError, DataError

MANIFEST_NAME = "manifest.json"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    run_id: str
    created: str = field(default_factory=_now)
    updated: str = field(default_factory=_now)
    tool_version: str = __version__
    dataset: dict = field(default_factory=dict)
    preprocessing: dict = field(default_factory=dict)
    backbone: dict | None = None
    head: dict | None = None
    train_config: dict | None = None
    seeds: dict = field(default_factory=dict)
    explain: dict = field(default_factory=dict)
    # name -> path relative to the run directory
    artifacts: dict = field(default_factory=dict)

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunManifest":
        path = Path(run_dir) / MANIFEST_NAME
        try:
            return cls(**json.loads(path.read_text()))
        except OSError as e:
            raise ArtifactIOError(f"no readable manifest at {path}: {e}") from e

    def save(self, run_dir: str | Path) -> Path:
        self.updated = _now()
        path = Path(run_dir) / MANIFEST_NAME
        try:
            path.write_text(json.dumps(asdict(self), indent=2))
        except OSError as e:
            raise ArtifactIOError(f"cannot write manifest {path}: {e}") from e
        return path

    def add_artifact(self, name: str, path: str | Path, run_dir: str | Path) -> None:
        self.artifacts[name] = Path(path).resolve().relative_to(Path(run_dir).resolve()).as_posix()

    def artifact(self, name: str, run_dir: str | Path) -> Path:
        if name not in self.artifacts:
            raise DataError(f"run {self.run_id} has no {name!r} artifact; run the producing step first")
        return Path(run_dir) / self.artifacts[name]

    def missing_artifacts(self, run_dir: str | Path) -> list[str]:
        return [rel for rel in self.artifacts.values() if not (Path(run_dir) / rel).exists()]
