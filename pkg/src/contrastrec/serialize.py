"""Deterministic versioned binary container for named numpy arrays.

Model checkpoints must be byte-identical across runs with the same seeds,
which rules out zip-based formats that embed timestamps. The layout is:

    magic 'CRBF' | uint32 version | uint64 header length | header JSON | raw array bytes

The header JSON (sorted keys) records a free-form ``meta`` dict plus the
name, dtype, and shape of each array in write order; array payloads follow
in the same order as contiguous C-order bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAGIC = b"CRBF"
FORMAT_VERSION = 1


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Write ``arrays`` (name -> ndarray) and JSON-safe ``meta`` to ``path``."""
    names = sorted(arrays)
    header = {
        "meta": meta or {},
        "arrays": [
            {
                "name": name,
                "dtype": str(np.asarray(arrays[name]).dtype),
                "shape": list(np.asarray(arrays[name]).shape),
            }
            for name in names
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name]).tobytes())


def load_arrays(path) -> tuple[dict, dict]:
    """Read a container written by :func:`save_arrays`.

    Returns (arrays, meta). Raises ValidationError on a bad magic or an
    unsupported format version.
    """
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValidationError(f"{path}: not a contrastrec binary file")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported format version {version}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    arrays = {}
    offset = 16 + hlen
    for spec in header["arrays"]:
        dtype = np.dtype(spec["dtype"])
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = dtype.itemsize * count
        arr = np.frombuffer(raw[offset : offset + nbytes], dtype=dtype).reshape(shape)
        arrays[spec["name"]] = arr.copy()
        offset += nbytes
    return arrays, header["meta"]
