"""Single-tensor binary container used for datasets and checkpoints.

Layout, all little endian:

    bytes 0..7    magic ``TFCK0001``
    bytes 8..11   u32 rank
    then          rank * u64 axis sizes
    then          raw float32 payload, row major

The payload is always float32; higher-precision arrays are cast on write.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TFCK0001"


class ContainerError(IOError):
    """Raised when a container file is malformed or truncated."""


def write_tensor(path, array) -> None:
    data = np.ascontiguousarray(np.asarray(array, dtype=np.float32))
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", data.ndim))
        fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
        fh.write(data.astype("<f4", copy=False).tobytes())


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 4:
        raise ContainerError(f"{path}: truncated header")
    if raw[:8] != MAGIC:
        raise ContainerError(f"{path}: bad magic {raw[:8]!r}")
    (rank,) = struct.unpack_from("<I", raw, 8)
    dims_end = 12 + 8 * rank
    if len(raw) < dims_end:
        raise ContainerError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}Q", raw, 12)
    count = 1
    for d in dims:
        if d < 1:
            raise ContainerError(f"{path}: invalid axis size {d}")
        count *= d
    expected = dims_end + 4 * count
    if len(raw) != expected:
        raise ContainerError(
            f"{path}: payload is {len(raw) - dims_end} bytes, expected {4 * count}")
    flat = np.frombuffer(raw, dtype="<f4", count=count, offset=dims_end)
    return flat.reshape(dims).astype(np.float32, copy=True)
