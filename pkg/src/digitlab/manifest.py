"""Run manifests: which command, inputs, seeds and outputs produced an artifact."""

from __future__ import annotations

import hashlib
import json
import os
from datetime import datetime, timezone
from pathlib import Path

MANIFEST_NAME = "manifest.json"
OUT_ROOT_ENV = "DIGITLAB_OUT"


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def write_manifest(
    out_dir: str | Path,
    command: str,
    config: dict,
    inputs: dict[str, str | Path] | None = None,
    seeds: dict[str, int] | None = None,
    outputs: list[str | Path] | None = None,
    name: str = MANIFEST_NAME,
) -> Path:
    """Write ``manifest.json`` (or ``name``) into ``out_dir``.

    Timestamps live only here, so the artifacts themselves stay byte-stable
    across reruns with identical inputs.
    """
    out = Path(out_dir)
    inputs = {k: str(v) for k, v in (inputs or {}).items()}
    manifest = {
        "format": "digitlab.manifest/1",
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "inputs": inputs,
        "input_digests": {k: file_digest(v) for k, v in inputs.items() if Path(v).is_file()},
        "seeds": seeds or {},
        "outputs": [str(o) for o in outputs or []],
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    path = out / name
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path
