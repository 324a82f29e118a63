"""Writer/reader for the engine's binary class-token table.

Layout (little-endian): magic "FCLE", u32 version, u32 class count,
u32 tokens-per-class, u32 token dim, then float32 row-major data. This is
the engine's documented external format; the exporter carries its own
implementation so the two sides stay independently testable.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"FCLE"
VERSION = 1


def write_table(path: str, table: np.ndarray) -> None:
    table = np.asarray(table, dtype=np.float32)
    if table.ndim != 3:
        raise ValueError("class table must be (C, tokens_per_class, d_token)")
    c, t, d = table.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIII", VERSION, c, t, d))
        f.write(table.astype("<f4").tobytes(order="C"))


def read_table(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError("bad magic: not a class-token table")
        version, c, t, d = struct.unpack("<IIII", f.read(16))
        if version != VERSION:
            raise ValueError(f"unsupported table version {version}")
        payload = f.read(c * t * d * 4)
        if len(payload) != c * t * d * 4:
            raise ValueError("class-token table truncated")
    return np.frombuffer(payload, dtype="<f4").reshape(c, t, d).astype(np.float64)
