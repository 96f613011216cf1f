"""Run manifests: every output directory records what produced it.

The ``key`` section holds everything that determines the outputs (command,
configuration, seeds, input digests, tool version); two runs with equal keys
must produce byte-identical outputs. The ``run`` section holds incidental
facts such as timestamps.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

MANIFEST_NAME = "manifest.json"


def tool_version() -> str:
    try:
        return metadata.version("mlmbias")
    except metadata.PackageNotFoundError:
        return "unknown"


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    version: str = field(default_factory=tool_version)
    created_at: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat()
    )

    def add_input(self, path: str | Path) -> None:
        self.inputs[str(path)] = file_digest(path)

    def add_bytes(self, name: str, data: bytes) -> None:
        self.inputs[name] = hashlib.sha256(data).hexdigest()

    def key(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "version": self.version,
        }

    def write(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        payload = {"key": self.key(), "run": {"created_at": self.created_at}}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
        return path


def read_manifest_key(out_dir: str | Path) -> dict:
    payload = json.loads((Path(out_dir) / MANIFEST_NAME).read_text(encoding="utf-8"))
    return payload["key"]
