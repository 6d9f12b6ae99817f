"""Named-tensor container shared by weights, prompts, generators and beacons.

A checkpoint is an uncompressed ``.npz`` archive.  Besides the named arrays it
holds a ``__meta__`` entry: UTF-8 JSON with the format tag and free-form
metadata (configs, digests).  Arrays round-trip bitwise.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT = "fedapt-ckpt/1"
_META_KEY = "__meta__"


class CheckpointError(ValueError):
    pass


def digest(tensors: Mapping[str, np.ndarray]) -> str:
    """Order-independent sha256 over names, dtypes, shapes and raw bytes."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if _META_KEY in tensors:
        raise CheckpointError(f"tensor name {_META_KEY!r} is reserved")
    header = {"format": FORMAT, "digest": digest(tensors), "meta": dict(meta or {})}
    blob = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    arrays = {name: np.ascontiguousarray(arr) for name, arr in tensors.items()}
    with open(path, "wb") as fh:
        np.savez(fh, **arrays, **{_META_KEY: blob})
    return path


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        if _META_KEY not in archive.files:
            raise CheckpointError(f"{path}: missing header")
        header = json.loads(archive[_META_KEY].tobytes().decode())
        tensors = {k: archive[k] for k in archive.files if k != _META_KEY}
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported format {header.get('format')!r}")
    if header.get("digest") != digest(tensors):
        raise CheckpointError(f"{path}: digest mismatch, file is corrupt")
    return tensors, header.get("meta", {})
