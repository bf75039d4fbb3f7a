"""Flat binary checkpoints for model parameters.

Layout::

    8 bytes   magic b"RGCKPT01"
    4 bytes   little-endian uint32 N, length of the JSON header
    N bytes   UTF-8 JSON: {"kind": str, "meta": {...},
                           "fields": [{"name": str, "shape": [int, ...]}, ...]}
    rest      every field in header order, C-order, little-endian float64

Field order is whatever the model's ``state_dict`` yields; it is recorded in
the header so readers never need to guess.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RGCKPT01"


def save_arrays(path, arrays: dict, kind: str, meta: dict | None = None) -> None:
    fields = [{"name": name, "shape": list(np.shape(arr))} for name, arr in arrays.items()]
    header = json.dumps({"kind": kind, "meta": meta or {}, "fields": fields}, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for arr in arrays.values())
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(header)) + header + body)


def load_arrays(path) -> tuple[str, dict, dict]:
    """Returns (kind, meta, arrays)."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + n].decode())
    offset = 12 + n
    arrays = {}
    for f in header["fields"]:
        count = int(np.prod(f["shape"])) if f["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(float)
        arrays[f["name"]] = arr.reshape(f["shape"])
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after declared fields")
    return header["kind"], header["meta"], arrays
