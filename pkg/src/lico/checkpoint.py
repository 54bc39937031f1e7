"""Binary checkpoint serialization.

Layout: magic "LICOCKPT", u32 LE version=1, u32 LE tensor count, then per
tensor: u16 LE name length, UTF-8 name, u8 rank, rank x u32 LE extents,
f32 LE payload. Tensors are written sorted by name so identical state maps
to identical bytes.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DomainError

MAGIC = b"LICOCKPT"
VERSION = 1


def save_tensors(path: str, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        if arr.ndim > 0:
            arr = np.ascontiguousarray(arr)  # keep rank-0 as rank-0
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise DomainError(f"tensor name too long: {name!r}")
        if arr.ndim > 0xFF:
            raise DomainError(f"tensor rank too large: {arr.ndim}")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_tensors(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise DomainError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise DomainError(f"{path}: unsupported checkpoint version {version}")
    offset = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        out[name] = arr.copy()
    if offset != len(blob):
        raise DomainError(f"{path}: trailing bytes after last tensor")
    return out
