"""Binary tensor encoding: little-endian u64 rank, u64 dims, raw f32 payload."""
from __future__ import annotations

import struct
from typing import BinaryIO, Tuple

import numpy as np


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    header = struct.pack("<Q", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(tensor_to_bytes(arr))


def tensor_from_bytes(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (array, next offset)."""
    try:
        (rank,) = struct.unpack_from("<Q", buf, offset)
        offset += 8
        dims = struct.unpack_from(f"<{rank}Q", buf, offset)
    except struct.error as exc:
        raise ValueError("truncated tensor header") from exc
    offset += 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = offset + 4 * count
    if end > len(buf):
        raise ValueError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(dims).astype(np.float32)
    return arr, end
