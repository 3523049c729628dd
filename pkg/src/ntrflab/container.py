"""Versioned binary container for arrays.

Layout (all little-endian):

    8 bytes   magic  b"NTRFLAB\\0"
    u32       format version
    u32       length of the JSON header in bytes
    ...       UTF-8 JSON header: {"kind", "meta", "arrays": [{name, dtype, shape}]}
    ...       raw array bytes in header order, C (row-major) layout

Arrays are written byte-for-byte so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError

MAGIC = b"NTRFLAB\0"
VERSION = 1


def save(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    entries, blobs = [], []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        arr = arr.astype(dt, copy=False)
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes(order="C"))
    header = json.dumps({"kind": kind, "meta": meta or {}, "arrays": entries},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def load(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise DataFormatError(f"{path}: not an ntrflab container")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported container version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    if kind is not None and header["kind"] != kind:
        raise DataFormatError(f"{path}: expected a {kind!r} container, found {header['kind']!r}")
    pos = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if pos + nbytes > len(raw):
            raise DataFormatError(f"{path}: truncated array {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=dt, count=count, offset=pos).reshape(
            e["shape"]).copy()
        pos += nbytes
    return arrays, header["meta"]
