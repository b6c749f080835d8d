"""Binary checkpoint container.

Layout (little endian)::

    magic   8 bytes   b"XREIDCKP"
    version u32
    hlen    u32       length of the UTF-8 JSON header
    header  hlen bytes
    then, for every tensor listed in header["tensors"] (in order), its raw bytes

The header records the architecture, seed and training position; each tensor
entry gives name, dtype ("<f4" or "<f8") and shape. Values round-trip bit for
bit.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"XREIDCKP"
VERSION = 1
_ALLOWED = {"<f4", "<f8"}


class CheckpointError(IOError):
    pass


def save(path: str | os.PathLike, arrays: dict[str, np.ndarray], header: dict) -> Path:
    path = Path(path)
    entries = []
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        dt = a.dtype.newbyteorder("<").str
        if dt not in _ALLOWED:
            raise CheckpointError(f"tensor {name}: unsupported dtype {a.dtype}")
        entries.append({"name": name, "dtype": dt, "shape": list(a.shape)})
        blobs.append(a.astype(dt, copy=False).tobytes())
    full = dict(header, tensors=entries)
    head = json.dumps(full, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)
    return path


def load(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    offset = 16 + hlen
    header = json.loads(data[16:offset].decode("utf-8"))
    arrays = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated while reading {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(entry["shape"]).copy()
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return header, arrays
