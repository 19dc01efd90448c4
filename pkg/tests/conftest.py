"""Shared helpers: a hand-built NIfTI-1 writer (independent of the package
reader) and small random-volume factories."""

from __future__ import annotations

import gzip
import struct

import numpy as np
import pytest

from mamoc import Volume

NIFTI_CODES = {"uint8": 2, "int16": 4, "float32": 16, "float64": 64}


def build_nifti(
    raw: np.ndarray,
    *,
    spacing=(1.0, 1.0, 1.0),
    byte_order: str = "<",
    scl_slope: float = 0.0,
    scl_inter: float = 0.0,
    magic: bytes = b"n+1\x00",
    vox_offset: float = 352.0,
    gzip_container: bool = False,
    dim0: int | None = None,
) -> bytes:
    """Assemble NIfTI-1 bytes field by field, by hand."""
    raw = np.asarray(raw)
    code = NIFTI_CODES[raw.dtype.name]
    header = bytearray(348)
    struct.pack_into(byte_order + "i", header, 0, 348)
    dims = raw.shape
    struct.pack_into(
        byte_order + "8h", header, 40, dim0 if dim0 is not None else 3, *dims, 1, 1, 1, 1
    )
    struct.pack_into(byte_order + "h", header, 70, code)
    struct.pack_into(byte_order + "h", header, 72, raw.dtype.itemsize * 8)
    struct.pack_into(byte_order + "8f", header, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into(byte_order + "f", header, 108, vox_offset)
    struct.pack_into(byte_order + "f", header, 112, scl_slope)
    struct.pack_into(byte_order + "f", header, 116, scl_inter)
    header[344:348] = magic

    payload = raw.astype(raw.dtype.newbyteorder(byte_order)).ravel(order="F").tobytes()
    pad = b"\x00" * (int(vox_offset) - 348) if magic == b"n+1\x00" else b""
    blob = bytes(header) + pad + payload
    if gzip_container:
        blob = gzip.compress(blob)
    return blob


def random_volume(rng: np.random.Generator, dims=(6, 5, 4), spacing=None) -> Volume:
    data = rng.standard_normal(dims).astype(np.float32)
    if spacing is None:
        spacing = tuple(float(s) for s in rng.uniform(0.5, 3.0, size=3))
    return Volume(data, spacing)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
