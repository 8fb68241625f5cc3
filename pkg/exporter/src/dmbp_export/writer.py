"""DMBPW001 weight file writer.

Layout (little-endian): 8-byte magic "DMBPW001", u32 tensor count, then per
tensor a u16 name length, the UTF-8 name, a u8 rank, rank u32 extents, and
the float32 values in row-major order.  Scalars use rank 0.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Iterable, Tuple

import numpy as np

MAGIC = b"DMBPW001"


def encode_tensors(tensors: Iterable[Tuple[str, np.ndarray]]) -> bytes:
    items = list(tensors)
    blob = bytearray(MAGIC)
    blob += struct.pack("<I", len(items))
    for name, arr in items:
        arr = np.asarray(arr, dtype="<f4")
        if arr.ndim:
            # note: ascontiguousarray would promote rank 0 to rank 1
            arr = np.ascontiguousarray(arr)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name!r}")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        if arr.ndim:
            blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes(order="C")
    return bytes(blob)


def write_weight_file(path, tensors: Dict[str, np.ndarray]):
    Path(path).write_bytes(encode_tensors(tensors.items()))
