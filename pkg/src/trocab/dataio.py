"""Dataset file format.

Layout (little-endian):
    magic ``b"DSV1"`` | u32 sample count | u32 feature dim |
    u8 flags (bit 0: blob section present) |
    per-feature f32 min, then per-feature f32 max (normalization stats) |
    n x D f32 feature rows | n label bytes |
    if blobs: per sample u32 length + mini-PE bytes

Features are stored raw; loading normalizes with the stored min-max stats
(computed on the training split and shared across splits) and clips into
[0, 1], which is what makes the 8-bit quantization domain well-defined.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"DSV1"

_FLAG_BLOBS = 0x1


@dataclass
class Dataset:
    X: np.ndarray            # (n, D) float64, normalized into [0, 1]
    y: np.ndarray            # (n,) int64 labels in {0, 1}
    blobs: list[bytes] | None
    mins: np.ndarray
    maxs: np.ndarray


def write_dataset(path, X, y, blobs=None, stats=None) -> None:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, d = X.shape
    if y.shape != (n,):
        raise ValueError("labels must align with feature rows")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    if blobs is not None and len(blobs) != n:
        raise ValueError("blobs must align with feature rows")
    if stats is None:
        mins, maxs = X.min(axis=0), X.max(axis=0)
    else:
        mins, maxs = stats
    parts = [
        MAGIC,
        struct.pack("<IIB", n, d, _FLAG_BLOBS if blobs is not None else 0),
        np.asarray(mins, dtype="<f4").tobytes(),
        np.asarray(maxs, dtype="<f4").tobytes(),
        np.ascontiguousarray(X, dtype="<f4").tobytes(),
        y.astype(np.uint8).tobytes(),
    ]
    if blobs is not None:
        for blob in blobs:
            parts.append(struct.pack("<I", len(blob)))
            parts.append(blob)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_dataset(path, normalize: bool = True) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValueError("bad dataset magic")
    n, d, flags = struct.unpack_from("<IIB", raw, 4)
    off = 13
    mins = np.frombuffer(raw, dtype="<f4", count=d, offset=off).astype(np.float64)
    off += 4 * d
    maxs = np.frombuffer(raw, dtype="<f4", count=d, offset=off).astype(np.float64)
    off += 4 * d
    X = (
        np.frombuffer(raw, dtype="<f4", count=n * d, offset=off)
        .astype(np.float64)
        .reshape(n, d)
    )
    off += 4 * n * d
    y = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off).astype(np.int64)
    off += n
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("corrupt label byte")
    blobs = None
    if flags & _FLAG_BLOBS:
        blobs = []
        for _ in range(n):
            if off + 4 > len(raw):
                raise ValueError("truncated blob section")
            (length,) = struct.unpack_from("<I", raw, off)
            off += 4
            if off + length > len(raw):
                raise ValueError("truncated blob section")
            blobs.append(raw[off : off + length])
            off += length
    if normalize:
        span = maxs - mins
        safe = np.where(span > 0, span, 1.0)
        X = np.clip((X - mins) / safe, 0.0, 1.0)
        X[:, span <= 0] = 0.0
    return Dataset(X=X, y=y, blobs=blobs, mins=mins, maxs=maxs)
