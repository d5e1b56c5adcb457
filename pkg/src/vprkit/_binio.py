"""Low-level helpers for the little-endian binary container formats."""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import BadMagicError, TruncatedStoreError, VersionMismatchError


def read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedStoreError(
            f"expected {n} bytes, got {len(data)} (file truncated)"
        )
    return data


def read_u16(fh: BinaryIO) -> int:
    return struct.unpack("<H", read_exact(fh, 2))[0]


def read_u32(fh: BinaryIO) -> int:
    return struct.unpack("<I", read_exact(fh, 4))[0]


def write_u16(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<H", value))


def write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<I", value))


def read_f32(fh: BinaryIO, count: int) -> np.ndarray:
    """Read `count` little-endian float32 values into a float64 array."""
    raw = read_exact(fh, 4 * count)
    return np.frombuffer(raw, dtype="<f4", count=count).astype(np.float64)


def write_f32(fh: BinaryIO, values: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def check_magic(fh: BinaryIO, magic: bytes) -> None:
    got = fh.read(len(magic))
    if len(got) != len(magic):
        raise TruncatedStoreError("file shorter than its magic header")
    if got != magic:
        raise BadMagicError(f"bad magic {got!r}, expected {magic!r}")


def check_version(fh: BinaryIO, expected: int) -> None:
    version = read_u32(fh)
    if version != expected:
        raise VersionMismatchError(f"unsupported version {version}, expected {expected}")


def read_id(fh: BinaryIO) -> str:
    length = read_u16(fh)
    return read_exact(fh, length).decode("utf-8")


def write_id(fh: BinaryIO, image_id: str) -> None:
    encoded = image_id.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise ValueError(f"image id too long ({len(encoded)} bytes)")
    write_u16(fh, len(encoded))
    fh.write(encoded)
