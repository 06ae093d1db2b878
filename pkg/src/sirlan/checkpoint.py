"""Binary container for weights and shape models.

Layout (all integers little-endian)::

    bytes 0-7    magic  b"SIRLAN\\x00\\x01"
    bytes 8-11   uint32 format version (currently 1)
    bytes 12-19  uint64 header length H
    next H bytes UTF-8 JSON header:
                 {"meta": {...}, "tensors": [{"name", "kind", "shape"}, ...]}
    remainder    float64 little-endian payloads, one per manifest entry,
                 row-major, concatenated in manifest order

The payload size is exactly ``8 * sum(prod(shape))`` bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"SIRLAN\x00\x01"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save_tensors(path, tensors, meta: dict | None = None) -> int:
    """Write ``tensors`` (iterable of ``(name, kind, array)``) to ``path``.

    Returns the payload size in bytes.
    """
    manifest, blobs = [], []
    for name, kind, arr in tensors:
        arr = np.asarray(arr, dtype="<f8", order="C")
        manifest.append({"name": name, "kind": kind, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({"meta": meta or {}, "tensors": manifest}, sort_keys=True).encode()
    payload = b"".join(blobs)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        fh.write(payload)
    return len(payload)


def load_tensors(path) -> tuple[dict, list[tuple[str, str, np.ndarray]]]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise DataError(f"{path}: file too short for a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    start = _PREFIX.size
    header = json.loads(data[start:start + hlen].decode())
    offset = start + hlen
    out = []
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * n > len(data):
            raise DataError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        out.append((entry["name"], entry["kind"], arr))
        offset += 8 * n
    if offset != len(data):
        raise DataError(f"{path}: {len(data) - offset} trailing bytes")
    return header["meta"], out


def payload_bytes(path) -> int:
    data = Path(path).read_bytes()
    _, _, hlen = _PREFIX.unpack_from(data)
    return len(data) - _PREFIX.size - hlen
