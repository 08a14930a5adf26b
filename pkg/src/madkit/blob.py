"""MDLT tensor blob format.

Layout (all little-endian, no padding, no checksum)::

    b"MDLT" | u32 version (=1) | u32 rank | rank x u32 dims | prod(dims) x f32
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"MDLT"
VERSION = 1
_U32 = struct.Struct("<I")


def encode(array) -> bytes:
    arr = np.asarray(getattr(array, "data", array), dtype="<f4")
    head = MAGIC + _U32.pack(VERSION) + _U32.pack(arr.ndim)
    head += b"".join(_U32.pack(d) for d in arr.shape)
    return head + np.ascontiguousarray(arr).tobytes()


def read_from(stream) -> np.ndarray:
    """Read one blob from a binary stream positioned at its magic bytes."""

    def take(n: int) -> bytes:
        chunk = stream.read(n)
        if len(chunk) != n:
            raise FormatError("truncated MDLT blob")
        return chunk

    if take(4) != MAGIC:
        raise FormatError("bad MDLT magic bytes")
    (version,) = _U32.unpack(take(4))
    if version != VERSION:
        raise FormatError(f"unsupported MDLT version {version}")
    (rank,) = _U32.unpack(take(4))
    dims = tuple(_U32.unpack(take(4))[0] for _ in range(rank))
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    raw = take(4 * count)
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)


def decode(buf: bytes) -> np.ndarray:
    stream = io.BytesIO(buf)
    arr = read_from(stream)
    if stream.read(1):
        raise FormatError("trailing bytes after MDLT blob")
    return arr


def atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, array) -> None:
    atomic_write(path, encode(array))


def load(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            return decode(fh.read())
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise FormatError(f"cannot read blob {path}: {exc}") from exc
