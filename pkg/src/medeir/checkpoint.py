"""Checkpoint serialization: a JSON manifest plus one raw little-endian blob.

A checkpoint is a directory:
    manifest.json   {"version": 1, "tensors": [{name, shape, dtype, offset}]}
    params.bin      concatenation of the tensors' bytes in manifest order

Model-level saves add sidecar files (config.json, vocab.txt) on top; those
live with the model code. All writes go through a temp file and an atomic
rename so a crash never leaves a half-written artifact behind.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "int32": "<i4",
}
_CANONICAL = {np.dtype(v): k for k, v in _DTYPES.items()}


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_arrays(directory: Path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays as manifest.json + params.bin under directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    blob = bytearray()
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        canonical = _CANONICAL.get(np.dtype(arr.dtype.name))
        if canonical is None:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[canonical]).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": canonical,
            "offset": len(blob),
        })
        blob.extend(raw)
    manifest = {"version": CHECKPOINT_VERSION, "tensors": entries}
    atomic_write_text(directory / "manifest.json",
                      json.dumps(manifest, indent=2) + "\n")
    atomic_write_bytes(directory / "params.bin", bytes(blob))


def load_arrays(directory: Path) -> dict[str, np.ndarray]:
    directory = Path(directory)
    with open(directory / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if "version" not in manifest:
        raise ValueError("checkpoint manifest missing version field")
    if manifest["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest['version']}")
    blob = (directory / "params.bin").read_bytes()
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * dtype.itemsize
        arr = np.frombuffer(blob[start:end], dtype=dtype).reshape(shape)
        arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="))
    return arrays


def checkpoint_hash(directory: Path) -> str:
    """Stable content hash over the manifest and parameter blob."""
    directory = Path(directory)
    digest = hashlib.sha256()
    for name in ("manifest.json", "params.bin", "config.json", "vocab.txt"):
        path = directory / name
        if path.exists():
            digest.update(name.encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
