"""Writer for the VPRD dense-map container consumed by the retrieval engine.

The format is the interface to the retrieval side and is implemented here
independently: little-endian, magic "VPRD", version u32=1, image_count u32,
then per image an id (u16 length + UTF-8 bytes), H, W, C as u32, the
H*W*C float32 tensor in row-major (y, x, c) order, and the H*W float32
attention map.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"VPRD"
VERSION = 1


class DenseMapWriter:
    """Streams (image_id, tensor, attention) records into a VPRD file."""

    def __init__(self, fh: BinaryIO):
        self._fh = fh
        self._count = 0
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, 0))  # count patched on close

    def add(self, image_id: str, tensor: np.ndarray, attention: np.ndarray) -> None:
        if tensor.ndim != 3:
            raise ValueError(f"tensor must be (H, W, C), got {tensor.shape}")
        if attention.shape != tensor.shape[:2]:
            raise ValueError(
                f"attention {attention.shape} does not match tensor {tensor.shape[:2]}"
            )
        encoded = image_id.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"image id too long: {image_id!r}")
        h, w, c = tensor.shape
        self._fh.write(struct.pack("<H", len(encoded)))
        self._fh.write(encoded)
        self._fh.write(struct.pack("<III", h, w, c))
        self._fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
        self._fh.write(np.ascontiguousarray(attention, dtype="<f4").tobytes())
        self._count += 1

    def close(self) -> None:
        self._fh.seek(len(MAGIC) + 4)
        self._fh.write(struct.pack("<I", self._count))


def write_dense_file(path: str | Path, records) -> int:
    """Write an iterable of (image_id, tensor, attention) records; returns count."""
    with open(path, "wb") as fh:
        writer = DenseMapWriter(fh)
        for image_id, tensor, attention in records:
            writer.add(image_id, tensor, attention)
        writer.close()
        return writer._count


def expected_payload_bytes(entries: list[tuple[str, int, int, int]]) -> int:
    """Byte size a VPRD file must have for the given (id, H, W, C) records."""
    total = len(MAGIC) + 8  # magic + version + count
    for image_id, h, w, c in entries:
        total += 2 + len(image_id.encode("utf-8")) + 12
        total += 4 * (h * w * c + h * w)
    return total
