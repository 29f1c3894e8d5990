"""Run manifests written next to every artifact a command produces."""

from __future__ import annotations

import hashlib
import json
import os
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

MANIFEST_NAME = "manifest.json"


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def tree_sha256(path: str | os.PathLike) -> str:
    """Hash of a file, or of every file under a directory (names included, manifests skipped)."""
    path = Path(path)
    if path.is_file():
        return file_sha256(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file() and p.name != MANIFEST_NAME):
        h.update(str(f.relative_to(path)).encode())
        h.update(file_sha256(f).encode())
    return h.hexdigest()


def build_manifest(command: str, config: dict, seeds: dict, inputs: dict) -> dict:
    return {
        "tool": "apc",
        "version": __version__,
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": {name: {"path": str(p), "sha256": tree_sha256(p)} for name, p in inputs.items()},
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "created": datetime.now(timezone.utc).isoformat(),
    }


def write_manifest(out_dir: str | os.PathLike, manifest: dict) -> Path:
    path = Path(out_dir) / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
    return path


def comparable(manifest: dict) -> dict:
    """The manifest minus fields that legitimately differ between identical runs."""
    return {k: v for k, v in manifest.items() if k not in ("created",)}
