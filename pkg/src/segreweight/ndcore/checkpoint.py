"""Flat binary checkpoint format for named tensors.

Layout (all integers unsigned 32-bit little-endian)::

    count
    repeated count times:
        name_length, name (UTF-8), rank, dims[rank], values (float64 LE, C order)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import ContractError


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ContractError("checkpoint truncated")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims)
        tensors[name] = arr.astype(np.float64)
    if pos != len(buf):
        raise ContractError("trailing bytes after checkpoint payload")
    return tensors


def save(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
