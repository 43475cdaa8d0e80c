"""``SDE1`` parameter checkpoints.

Layout: magic ``b"SDE1"``, then per parameter: u32 name length, utf-8 name,
u32 rank, rank x u32 extents, float32 little-endian values.  Records run to EOF.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SDE1"


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not an SDE1 checkpoint")
    pos = 4
    state: dict[str, np.ndarray] = {}
    while pos < len(buf):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        state[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * count
    return state
