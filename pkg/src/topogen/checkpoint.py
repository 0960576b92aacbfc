"""Manifest + blob checkpoint format shared by all model files.

A checkpoint is a JSON manifest listing tensor name, shape and byte offset,
next to a raw binary blob of little-endian float32 values in row-major order.
The manifest's ``meta`` block carries whatever config makes the file
self-describing (network config, schedule parameters, normalization stats).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_tensors(json_path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write ``<stem>.json`` manifest and ``<stem>.bin`` blob."""
    json_path = Path(json_path)
    bin_path = json_path.with_suffix(".bin")
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "blob": bin_path.name,
        "blob_bytes": offset,
        "meta": meta,
        "tensors": entries,
    }
    json_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    bin_path.write_bytes(b"".join(chunks))


def load_tensors(json_path) -> tuple[dict[str, np.ndarray], dict]:
    """Load tensors (as float64) and the meta block."""
    json_path = Path(json_path)
    try:
        manifest = json.loads(json_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed manifest {json_path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version!r} in {json_path}")
    blob_path = json_path.parent / manifest["blob"]
    blob = blob_path.read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(
            f"blob {blob_path} has {len(blob)} bytes, manifest expects {manifest['blob_bytes']}"
        )
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise CheckpointError(f"tensor {entry['name']} overruns blob in {json_path}")
        flat = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        tensors[entry["name"]] = flat.reshape(shape).astype(np.float64)
    return tensors, manifest["meta"]
