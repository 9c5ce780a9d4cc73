"""Parameter checkpoint container.

Layout: 8-byte magic, 8-byte little-endian header length, UTF-8 JSON header,
then the raw payload.  The header maps each parameter name to its shape,
dtype, and byte offset into the payload; values are stored little-endian
(float64 unless the array is float32).
"""

from __future__ import annotations

import json
import numpy as np

from .tensor import Tensor

MAGIC = b"RNASCKPT"

__all__ = ["save_checkpoint", "load_checkpoint", "MAGIC"]


def save_checkpoint(path, arrays):
    """Write named arrays (Tensor or ndarray values) to `path`."""
    header = {}
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        if isinstance(arr, Tensor):
            arr = arr.data
        arr = np.asarray(arr)
        if arr.dtype == np.float32:
            dtype = "<f4"
        else:
            arr = arr.astype(np.float64)
            dtype = "<f8"
        blob = arr.astype(dtype).tobytes(order="C")
        header[name] = {
            "shape": list(arr.shape),
            "dtype": dtype,
            "offset": offset,
            "nbytes": len(blob),
        }
        blobs.append(blob)
        offset += len(blob)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(head).to_bytes(8, "little"))
        f.write(head)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Read a checkpoint back as {name: ndarray}."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        head_len = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(head_len).decode("utf-8"))
        payload = f.read()
    out = {}
    for name, meta in header.items():
        start = meta["offset"]
        raw = payload[start : start + meta["nbytes"]]
        if len(raw) != meta["nbytes"]:
            raise ValueError(f"truncated checkpoint: parameter '{name}'")
        arr = np.frombuffer(raw, dtype=meta["dtype"]).reshape(meta["shape"])
        out[name] = arr.astype(np.float64 if meta["dtype"] == "<f8" else np.float32)
    return out
