"""Shared test utilities (fixture writers, tiny model bundles)."""

from __future__ import annotations

import struct

import numpy as np


def write_embedding_file(path: str, names: list[str], rows: np.ndarray) -> None:
    """Write a LICOEMB1 class-embedding file (test fixture twin of the exporter)."""
    num, dim = rows.shape
    assert num == len(names)
    chunks = [b"LICOEMB1", struct.pack("<III", 1, num, dim)]
    for name in names:
        enc = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(enc)))
        chunks.append(enc)
    chunks.append(np.ascontiguousarray(rows, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    rows = rng.normal(size=(n, d))
    return (rows / np.linalg.norm(rows, axis=1, keepdims=True)).astype(np.float32)
