"""Self-describing parameter archives.

A checkpoint is one ``.npz`` holding a JSON manifest plus named float
arrays. The manifest records every array's shape; loading verifies each
stored array against it and rejects mismatches, so a truncated or
mismatched checkpoint fails loudly instead of mis-shaping a model.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import DataError


def save_archive(path: str | Path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    manifest = dict(manifest)
    manifest["shapes"] = {k: list(v.shape) for k, v in arrays.items()}
    payload = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    payload["__manifest__"] = np.frombuffer(json.dumps(manifest).encode("utf-8"), dtype=np.uint8)
    np.savez_compressed(path, **payload)


def load_archive(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with np.load(path) as data:
        if "__manifest__" not in data:
            raise DataError(f"{path}: not a deidseq checkpoint (missing manifest)")
        manifest = json.loads(bytes(data["__manifest__"]).decode("utf-8"))
        arrays = {k: data[k] for k in data.files if k != "__manifest__"}
    shapes = manifest.get("shapes", {})
    if set(shapes) != set(arrays):
        missing = set(shapes) ^ set(arrays)
        raise DataError(f"{path}: manifest/array mismatch for keys {sorted(missing)}")
    for key, shape in shapes.items():
        if list(arrays[key].shape) != shape:
            raise DataError(f"{path}: array {key} has shape {list(arrays[key].shape)}, manifest says {shape}")
    return manifest, arrays
