"""SLV1 binary checkpoint container.

Layout (all integers 64-bit little-endian unsigned):

    magic   4 bytes, b"SLV1"
    count   u64, number of tensor records
    record  repeated ``count`` times:
        name_len  u64
        name      name_len bytes, UTF-8
        rank      u64
        dims      rank * u64
        payload   prod(dims) float64 values, little-endian

Round trips are bit-exact: values are stored and restored as raw float64.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SLV1"


class CheckpointError(IOError):
    """Bad magic, truncation, or otherwise malformed checkpoint file."""


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            raw_name = name.encode("utf-8")
            f.write(struct.pack("<Q", len(raw_name)))
            f.write(raw_name)
            f.write(struct.pack("<Q", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what} "
                              f"(wanted {n} bytes, got {len(buf)})")
    return buf


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (count,) = struct.unpack("<Q", _read_exact(f, 8, "record count"))
        for i in range(count):
            (name_len,) = struct.unpack("<Q", _read_exact(f, 8, f"record {i} name length"))
            name = _read_exact(f, name_len, f"record {i} name").decode("utf-8")
            (rank,) = struct.unpack("<Q", _read_exact(f, 8, f"{name}: rank"))
            dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, f"{name}: dims"))
            n = int(np.prod(dims)) if rank else 1
            payload = _read_exact(f, 8 * n, f"{name}: payload")
            arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
            tensors[name] = arr
    return tensors
