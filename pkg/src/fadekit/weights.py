"""Flat binary container for named weight tensors.

Layout: the magic string ``FADEKIT1``, then one record per tensor:

* name length, unsigned 64-bit little-endian
* name bytes (UTF-8)
* rank, unsigned 64-bit little-endian
* dims, rank x unsigned 64-bit little-endian
* data, product(dims) x IEEE-754 float64 little-endian, row-major

Records are read until end of file; any leftover bytes are an error.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"FADEKIT1"


class WeightFormatError(ValueError):
    """The file is not a valid weight container."""


def save_weights(path, tensors: Mapping[str, "Tensor | np.ndarray"]) -> None:
    """Write named tensors in insertion order."""
    chunks = [MAGIC]
    for name, value in tensors.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path) -> dict[str, Tensor]:
    """Read a container back into name -> leaf Tensor, preserving order."""
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise WeightFormatError(f"{path}: bad magic, not a weight container")
    offset = len(MAGIC)

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise WeightFormatError(f"{path}: truncated while reading {what}")
        piece = blob[offset : offset + n]
        offset += n
        return piece

    out: dict[str, Tensor] = {}
    while offset < len(blob):
        (name_len,) = struct.unpack("<Q", take(8, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        count = 1
        for d in dims:
            count *= d
        data = np.frombuffer(take(8 * count, f"data of {name!r}"), dtype="<f8").reshape(dims)
        if name in out:
            raise WeightFormatError(f"{path}: duplicate tensor name {name!r}")
        out[name] = Tensor(data.astype(np.float64))
    return out
