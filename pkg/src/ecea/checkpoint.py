"""Versioned binary checkpoint container.

Layout::

    MAGIC (8 bytes) | version u32 | header length u64 | JSON header | blobs | SHA-256 of all prior bytes

The header lists every array (name, dtype, shape, offset, nbytes) plus free
metadata such as the config and its hash. Loading parses and verifies the whole
file before returning anything, so a bad file never yields partial state.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ECEACKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def config_hash(obj) -> str:
    """Stable short hash of a JSON-serialisable config."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _entries(prefix: str, arrays: dict[str, np.ndarray], offset: int, out: list, blobs: list) -> int:
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        if a.dtype.byteorder == ">":
            a = a.astype(a.dtype.newbyteorder("<"))
        raw = a.tobytes()
        out.append({"group": prefix, "name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                    "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    return offset


def dumps(ckpt: Checkpoint) -> bytes:
    entries, blobs = [], []
    off = _entries("params", ckpt.params, 0, entries, blobs)
    _entries("optimizer", ckpt.optimizer, off, entries, blobs)
    header = json.dumps({"arrays": entries, "meta": ckpt.meta}, sort_keys=True, default=str).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def loads(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size + _DIGEST:
        raise CheckpointError(f"checkpoint truncated: {len(data)} bytes")
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted file)")
    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from None
    blob = memoryview(body)[start + hlen:]
    groups: dict[str, dict[str, np.ndarray]] = {"params": {}, "optimizer": {}}
    for e in header["arrays"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"array {e['name']} runs past end of file")
        a = np.frombuffer(blob[e["offset"]:end], dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        groups[e["group"]][e["name"]] = a
    return Checkpoint(groups["params"], groups["optimizer"], header.get("meta", {}))


def save(path, ckpt: Checkpoint) -> Path:
    """Write atomically: a temp file is renamed into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(dumps(ckpt))
    os.replace(tmp, path)
    return path


def load(path) -> Checkpoint:
    with open(path, "rb") as f:
        return loads(f.read())
