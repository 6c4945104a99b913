"""Byte-stable JSON/CSV emission and run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__

__all__ = ["SCHEMA_VERSION", "to_jsonable", "dumps", "write_json", "write_csv", "write_manifest"]

SCHEMA_VERSION = "1.0"


def to_jsonable(obj):
    """Plain JSON types; non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(payload: dict) -> str:
    body = {"schema_version": SCHEMA_VERSION, **to_jsonable(payload)}
    return json.dumps(body, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(payload))
    return path


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir, command: str, seed: int, model, files, config: dict, workers: int) -> Path:
    """manifest.json; everything except the ``volatile`` block is reproducible."""
    out_dir = Path(out_dir)
    payload = {
        "command": command,
        "seed": seed,
        "version": __version__,
        "model": {"name": model.name, "digest": model.digest(), "flags": list(model.flags),
                  "defaults_note": "numeric model parameters are implementer-chosen defaults"},
        "config": config,
        "files": {Path(f).name: _sha256(Path(f)) for f in sorted(files, key=lambda p: Path(p).name)},
        "volatile": {
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "workers": workers,
        },
    }
    return write_json(out_dir / "manifest.json", payload)
