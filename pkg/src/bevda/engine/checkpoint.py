"""Binary checkpoint format.

Layout: ``b"BDA1"`` followed by, for each named array, a u32 name length,
the UTF-8 name, a u32 rank, ``rank`` u32 extents and the float64 payload.
Everything is little-endian; records run to end of file.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"BDA1"


class CheckpointError(ValueError):
    pass


def dumps(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic; not a BDA1 checkpoint")
    out: dict[str, np.ndarray] = {}
    pos = 4
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(blob):
                raise CheckpointError(f"truncated payload for {name!r} at byte {pos}")
            out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated record at byte {pos}") from exc
    return out


def save(path, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
