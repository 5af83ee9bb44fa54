"""Versioned container of named float64 arrays.

Layout::

    b"REMCKPT\\0"            8-byte magic
    uint32 LE               format version
    uint64 LE               header length H
    H bytes                 UTF-8 JSON header
    payload                 little-endian float64 arrays back to back

The header records, per key, the shape and byte offset into the payload,
plus a sha256 of the payload and a free-form ``meta`` dict (config echo,
epoch). Keys and JSON are written in sorted order so identical contents give
identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"REMCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupt or incompatible checkpoint."""


def dumps(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for key in sorted(arrays):
        a = np.array(arrays[key], dtype="<f8", order="C")
        entries.append({"key": key, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    payload = b"".join(chunks)
    header = {
        "arrays": entries,
        "meta": meta or {},
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
        "version": VERSION,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(head)) + head + payload


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 20 or blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}; this build reads {VERSION}")
    try:
        header = json.loads(blob[20:20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    payload = blob[20 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"truncated payload: {len(payload)} of {header['payload_bytes']} bytes")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError("payload checksum mismatch")
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["key"]] = np.frombuffer(payload, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(dumps(arrays, meta))
    return path


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
