"""Versioned little-endian binary checkpoint container.

Layout: magic "MFTC" | u32 version | u64 header length | header JSON | tensor
bytes. The header carries the config plus a tensor directory of
(name, shape, dtype, offset); offsets are relative to the data section.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"MFTC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, config: dict, tensors: dict[str, np.ndarray]) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    directory = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        blob = arr.astype(dtype, copy=False).tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "dtype": dtype.str, "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": config, "tensors": directory}, sort_keys=True).encode("utf-8")

    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len).decode("utf-8"))
        data = f.read()
    tensors = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype=dtype, count=n, offset=start).reshape(shape)
        tensors[entry["name"]] = arr.copy()
    return header["config"], tensors
