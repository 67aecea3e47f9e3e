"""Self-describing binary container shared by checkpoints and dataset caches.

Layout (all integers little-endian)::

    magic      4 bytes  b"SSCT"
    version    u32
    header     u32 length + canonical JSON (sorted keys, compact separators)
    count      u32
    records    count x (u32 name length, UTF-8 name, u32 rank, rank x u64 dims,
                        raw little-endian float64 values, row-major)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SSCT"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_container(path, header: dict, arrays: dict) -> None:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    hdr = canonical_json(header).encode("utf-8")
    parts += [struct.pack("<I", len(hdr)), hdr, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def read_container(path):
    """Return ``(header, arrays)``; arrays keep their on-disk order."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ContainerError(f"{path}: truncated container")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise ContainerError(f"{path}: not a softsense container")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise ContainerError(
            f"{path}: container version {version}, expected {FORMAT_VERSION}"
        )
    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64)
        arrays[name] = data.reshape(dims)
    if pos != len(buf):
        raise ContainerError(f"{path}: trailing bytes after last record")
    return header, arrays
