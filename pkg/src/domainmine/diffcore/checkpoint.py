"""Versioned binary key -> array serialization.

Layout::

    b"DMCKPT\\0\\0"            8-byte magic
    uint32 LE               format version
    uint64 LE               header length H
    H bytes                 UTF-8 JSON header (sorted keys)
    ...                     raw little-endian array payloads, in header order

The header lists ``name``, ``dtype``, ``shape``, ``offset`` and ``nbytes`` for
every array plus a free-form ``meta`` object.  Nothing time-dependent is
written, so identical inputs give identical files.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import ContractError

MAGIC = b"DMCKPT\0\0"
FORMAT_VERSION = 1
_DTYPES = {"float64": "<f8", "int64": "<i8"}


def save_checkpoint(path, arrays, meta=None):
    path = Path(path)
    entries, payloads, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        kind = "int64" if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool else "float64"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
        entries.append({"name": name, "dtype": kind, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "arrays": entries, "meta": meta or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in payloads:
            fh.write(raw)
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    """Return ``(arrays, meta)``."""
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    if version != FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(blob[start : start + hlen].decode("utf-8"))
    base = start + hlen
    arrays = {}
    for e in header["arrays"]:
        lo = base + e["offset"]
        arr = np.frombuffer(blob, dtype=_DTYPES[e["dtype"]], count=e["nbytes"] // 8, offset=lo)
        arr = arr.reshape(e["shape"]).astype(np.int64 if e["dtype"] == "int64" else np.float64)
        arrays[e["name"]] = arr
    return arrays, header["meta"]
