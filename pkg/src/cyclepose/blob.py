"""Flat binary container used for checkpoints and dataset dumps.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"CYPBLOB1"
    bytes 8..15   uint64 header length H
    next H bytes  UTF-8 JSON header, keys sorted, no whitespace:
                  {"arrays": [{"dtype", "name", "nbytes", "offset", "shape"}, ...],
                   "meta": {...}}
    rest          raw C-order array bytes; ``offset`` is relative to this section

Identical inputs always produce identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CYPBLOB1"


class BlobError(ValueError):
    pass


def write_blob(path, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True,
                        separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def read_blob(path) -> tuple:
    """Return ``(meta, {name: array})``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise BlobError(f"{path}: not a cyclepose blob")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode())
    body = memoryview(raw)[16 + hlen:]
    arrays = {}
    for e in header["arrays"]:
        buf = body[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header["meta"], arrays
