"""Named-tensor checkpoint archive and atomic file writes.

An archive is two files side by side: ``<stem>.json`` holds the manifest
(name, shape, dtype, byte offset per tensor) and ``<stem>.bin`` the payload,
little-endian float32 values in row-major order.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

PAYLOAD_DTYPE = "<f4"


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _paths(stem: str | os.PathLike) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".bin")


def save_archive(stem: str | os.PathLike, tensors: dict[str, np.ndarray]) -> tuple[Path, Path]:
    manifest_path, payload_path = _paths(stem)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=PAYLOAD_DTYPE)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format": "named-tensor-archive/1", "byte_order": "little", "payload": payload_path.name, "tensors": entries}
    atomic_write_bytes(payload_path, b"".join(chunks))
    atomic_write_text(manifest_path, json.dumps(manifest, indent=2) + "\n")
    return manifest_path, payload_path


def load_archive(stem: str | os.PathLike) -> dict[str, np.ndarray]:
    manifest_path, payload_path = _paths(stem)
    manifest = json.loads(manifest_path.read_text())
    payload = payload_path.read_bytes()
    out = {}
    for entry in manifest["tensors"]:
        if entry["dtype"] != "float32":
            raise ValueError(f"unsupported dtype {entry['dtype']} for {entry['name']}")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=PAYLOAD_DTYPE, count=count, offset=entry["offset"])
        out[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return out
