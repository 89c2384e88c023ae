"""Versioned binary checkpoint container.

Layout: the magic line ``SRVD1\\n``, an 8-byte little-endian header
length, a JSON header with sorted keys, then the raw tensor payload.
The header carries arbitrary JSON metadata plus one entry per tensor
(name, dtype string, shape, byte offset, byte count). Tensors are
stored contiguously in the order listed.

Writes go through a temp file and an atomic replace so a crash cannot
leave a half-written checkpoint behind.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"SRVD1\n"
_ALLOWED_DTYPES = ("<f8", "<i8", "|b1")


def save_container(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write named arrays plus JSON-able metadata to one file."""
    path = Path(path)
    tensors = []
    payload = []
    offset = 0
    for name in sorted(arrays):
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
        arr = np.asarray(arrays[name], order="C")
        if arr.dtype == np.bool_:
            dtype = "|b1"
        else:
            dtype = arr.dtype.newbyteorder("<").str
        if dtype not in _ALLOWED_DTYPES:
            raise ValueError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = arr.astype(dtype).tobytes()
        tensors.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        payload.append(raw)
        offset += len(raw)
    try:
        header = json.dumps(
            {"version": 1, "meta": meta, "tensors": tensors}, sort_keys=True
        ).encode()
    except TypeError as exc:
        raise ValueError(f"meta is not JSON-serializable: {exc}") from None
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in payload:
            f.write(raw)
    os.replace(tmp, path)


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read back (meta, arrays); any structural problem is a CheckpointError."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    blob = path.read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointError(f"{path} is truncated before the header")
    (header_len,) = struct.unpack_from("<Q", blob, len(MAGIC))
    header_start = len(MAGIC) + 8
    payload_start = header_start + header_len
    if payload_start > len(blob):
        raise CheckpointError(f"{path} is truncated inside the header")
    try:
        header = json.loads(blob[header_start:payload_start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt header: {exc}") from None
    if header.get("version") != 1:
        raise CheckpointError(f"{path} has unsupported version {header.get('version')!r}")
    arrays = {}
    payload = blob[payload_start:]
    for entry in header["tensors"]:
        lo = entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(payload):
            raise CheckpointError(f"{path} is truncated inside tensor {entry['name']!r}")
        arr = np.frombuffer(payload[lo:hi], dtype=entry["dtype"]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("=")).copy()
    return header["meta"], arrays
