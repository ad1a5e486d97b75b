"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic b"EENDSSCK"
    u32       format version
    u64       header length in bytes
    header    UTF-8 JSON: {"version", "hyperparameters", "seed", "entries": [...], ...}
    payload   concatenated float32 little-endian arrays, one per entry

Each entry is ``{"name", "shape", "offset", "nbytes"}`` with ``offset``
relative to the start of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"EENDSSCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], hyperparameters: dict | None = None,
                    seed: int | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "version": VERSION,
        "hyperparameters": hyperparameters or {},
        "seed": seed,
        "entries": entries,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(arrays, header)``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen].decode("utf-8"))
    base = 20 + hlen
    arrays = {}
    for entry in header["entries"]:
        start = base + entry["offset"]
        raw = data[start:start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated entry {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(entry["shape"])
    return arrays, header


def array_digest(arrays: Mapping[str, np.ndarray], prefix: str = "") -> str:
    """SHA-256 over the named arrays whose names start with ``prefix``."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        if name.startswith(prefix):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes())
    return h.hexdigest()
