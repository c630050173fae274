"""Run manifests: enough provenance to reconstruct any emitted artifact."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .. import __version__
from ..errors import DataFormatError


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    command: str
    created_utc: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    code_version: str = __version__
    inputs: dict = field(default_factory=dict)    # path -> sha256
    outputs: list = field(default_factory=list)   # emitted file names
    extra: dict = field(default_factory=dict)     # e.g. grid padding info

    def add_input(self, path) -> None:
        self.inputs[str(Path(path).name)] = file_digest(path)

    def add_output(self, path) -> None:
        name = str(Path(path).name)
        if name not in self.outputs:
            self.outputs.append(name)

    def write(self, directory) -> Path:
        path = Path(directory) / "manifest.json"
        self.add_output(path)
        payload = {
            "config_hash": self.config_hash,
            "command": self.command,
            "created_utc": self.created_utc,
            "code_version": self.code_version,
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "extra": self.extra,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise DataFormatError(f"no manifest.json in {directory}") from None
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON: {exc.msg}") from None
