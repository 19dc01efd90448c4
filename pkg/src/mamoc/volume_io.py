"""Volume types, NIfTI-1 ingestion, the native MVOL1 format, resampling,
intensity normalization, and subject-level dataset splitting.

Conventions: a volume is a dense scalar grid indexed ``[x, y, z]`` with a
positive voxel spacing per axis. Flat serializations (NIfTI payloads and
the MVOL1 format) store voxels x-fastest. Intensities are dimensionless
float32; every public operation leaves them finite.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Mapping, Sequence

import numpy as np

from .errors import (
    BadMagic,
    DegenerateFraction,
    DimMismatch,
    EmptyInput,
    InvalidArgument,
    IoFailure,
    NonPositiveDim,
    TruncatedStream,
    UnsupportedDatatype,
)
from .interp import trilinear_sample

MVOL_MAGIC = "MVOL1"

# NIfTI-1 datatype codes this reader accepts.
_NIFTI_DTYPES = {
    2: np.uint8,
    4: np.int16,
    16: np.float32,
    64: np.float64,
}
_NIFTI_DTYPE_CODES = {np.dtype(v).name: k for k, v in _NIFTI_DTYPES.items()}


@dataclass(eq=False)
class Volume:
    """Dense 3D scalar grid with voxel spacing.

    ``data`` has shape ``dims`` and dtype float32. The constructor
    normalizes the dtype and rejects non-finite values and non-positive
    spacing.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise InvalidArgument(f"volume data must be 3D, got shape {arr.shape}")
        if any(n <= 0 for n in arr.shape):
            raise NonPositiveDim(f"volume dims must be positive, got {arr.shape}")
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        if not np.isfinite(arr).all():
            raise InvalidArgument("volume data contains non-finite values")
        self.data = arr
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise InvalidArgument(f"spacing must be three positive reals, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), self.spacing)

    def allclose(self, other: "Volume", atol: float = 0.0, rtol: float = 0.0) -> bool:
        return self.dims == other.dims and np.allclose(
            self.data, other.data, atol=atol, rtol=rtol
        )


@dataclass(eq=False)
class LabelVolume:
    """Dense 3D grid of non-negative integer class ids; 0 is background."""

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 3:
            raise InvalidArgument(f"label data must be 3D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype(np.int32)
        if arr.min(initial=0) < 0:
            raise InvalidArgument("label ids must be non-negative")
        self.labels = arr.astype(np.int32)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass
class SubjectRecord:
    """One subject's scans keyed by severity tag plus its split assignment.

    ``scans`` maps tags from {"clean", "moderate", "heavy"} to volumes.
    Synthetic datasets also carry the generating tissue labels and motion
    trajectories so downstream evaluation can reuse them.
    """

    subject_id: str
    scans: dict[str, Volume]
    split: str = "unassigned"
    labels: LabelVolume | None = None
    trajectories: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    test: tuple[str, ...]
    seed: int


# ---------------------------------------------------------------------------
# NIfTI-1


def _read_all(source: bytes | bytearray | BinaryIO) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    return source.read()


def load_nifti(source: bytes | bytearray | BinaryIO) -> Volume:
    """Decode a single-file NIfTI-1 volume, optionally gzip-compressed.

    Supports 3D volumes in uint8/int16/float32/float64, either byte
    order, with scl_slope/scl_inter rescaling applied when slope is
    nonzero. Orientation matrices are ignored; only pixdim spacing is
    kept. Rescaling is computed in float64 and stored as float32.
    """
    raw = _read_all(source)
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedStream(f"bad gzip container: {exc}") from exc
    if len(raw) < 348:
        raise TruncatedStream(f"header needs 348 bytes, stream has {len(raw)}")

    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise BadMagic(f"not a NIfTI-1 stream (magic {magic!r})")

    order = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != 348:
            raise BadMagic("header size field is not 348 in either byte order")
        order = ">"

    dim = struct.unpack_from(order + "8h", raw, 40)
    (datatype,) = struct.unpack_from(order + "h", raw, 70)
    pixdim = struct.unpack_from(order + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(order + "f", raw, 108)
    (scl_slope,) = struct.unpack_from(order + "f", raw, 112)
    (scl_inter,) = struct.unpack_from(order + "f", raw, 116)

    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NonPositiveDim(f"dim[0] must be in 1..7, got {ndim}")
    dims = tuple(int(d) for d in dim[1:4])
    if any(d <= 0 for d in dims):
        raise NonPositiveDim(f"volume dims must be positive, got {dims}")
    if ndim > 3 and any(d > 1 for d in dim[4 : 1 + ndim]):
        raise UnsupportedDatatype("only 3D volumes are supported")
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDatatype(f"datatype code {datatype} not supported")

    dt = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(order)
    offset = 348 if magic == b"ni1\x00" else max(348, int(vox_offset))
    count = dims[0] * dims[1] * dims[2]
    need = offset + count * dt.itemsize
    if len(raw) < need:
        raise TruncatedStream(f"payload needs {need} bytes, stream has {len(raw)}")

    flat = np.frombuffer(raw, dtype=dt, count=count, offset=offset)
    grid = flat.reshape(dims, order="F").astype(np.float64)
    if scl_slope != 0.0:
        grid = grid * np.float64(scl_slope) + np.float64(scl_inter)

    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:4])
    return Volume(grid.astype(np.float32), spacing)


def save_nifti(vol: Volume, path: str | Path) -> None:
    """Write a volume as single-file NIfTI-1 (float32, little-endian).

    Gzip-compresses when the path ends in ``.gz``.
    """
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, 3, *vol.dims, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, _NIFTI_DTYPE_CODES["float32"])
    struct.pack_into("<h", header, 72, 32)  # bitpix
    struct.pack_into("<8f", header, 76, 0.0, *vol.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, 352.0)  # vox_offset
    struct.pack_into("<f", header, 112, 0.0)  # scl_slope: no rescale
    struct.pack_into("<f", header, 116, 0.0)
    header[344:348] = b"n+1\x00"
    payload = vol.data.astype("<f4").ravel(order="F").tobytes()
    blob = bytes(header) + b"\x00\x00\x00\x00" + payload
    path = Path(path)
    try:
        if path.suffix == ".gz":
            # mtime pinned so identical volumes produce identical files
            blob = gzip.compress(blob, mtime=0)
        path.write_bytes(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Native MVOL1 format: one ASCII header line, then float32 LE payload.


def volume_to_bytes(vol: Volume) -> bytes:
    nx, ny, nz = vol.dims
    sx, sy, sz = vol.spacing
    header = f"{MVOL_MAGIC} {nx} {ny} {nz} {sx!r} {sy!r} {sz!r}\n".encode("ascii")
    return header + vol.data.astype("<f4").ravel(order="F").tobytes()


def volume_from_bytes(raw: bytes) -> Volume:
    newline = raw.find(b"\n")
    if newline < 0:
        raise BadMagic("missing header line")
    tokens = raw[:newline].decode("ascii", errors="replace").split()
    if len(tokens) != 7 or tokens[0] != MVOL_MAGIC:
        raise BadMagic(f"not an {MVOL_MAGIC} stream")
    try:
        dims = tuple(int(t) for t in tokens[1:4])
        spacing = tuple(float(t) for t in tokens[4:7])
    except ValueError as exc:
        raise BadMagic(f"malformed header: {exc}") from exc
    if any(d <= 0 for d in dims):
        raise NonPositiveDim(f"volume dims must be positive, got {dims}")
    count = dims[0] * dims[1] * dims[2]
    payload = raw[newline + 1 :]
    if len(payload) < 4 * count:
        raise TruncatedStream(f"payload needs {4 * count} bytes, got {len(payload)}")
    flat = np.frombuffer(payload, dtype="<f4", count=count)
    return Volume(flat.reshape(dims, order="F").astype(np.float32), spacing)


def save_volume(vol: Volume, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.write_bytes(volume_to_bytes(vol))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def load_volume(path: str | Path) -> Volume:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return volume_from_bytes(raw)


def load_scan(path: str | Path) -> Volume:
    """Load a volume from disk, sniffing NIfTI-1 (possibly gzipped) vs MVOL1."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"\x1f\x8b" or (len(raw) >= 348 and raw[344:348] in (b"n+1\x00", b"ni1\x00")):
        return load_nifti(raw)
    return volume_from_bytes(raw)


# ---------------------------------------------------------------------------
# Intensity normalization and resampling


def normalize_least_squares(vol: Volume, reference: Volume) -> Volume:
    """Scale ``vol`` by the factor minimizing the squared error to ``reference``.

    The minimizer of ``|a*vol - reference|^2`` is
    ``a = sum(vol*reference) / sum(vol^2)``; an identically zero input is
    returned unchanged.
    """
    if vol.dims != reference.dims:
        raise DimMismatch(f"{vol.dims} vs {reference.dims}")
    v = vol.data.astype(np.float64)
    den = float(np.sum(v * v))
    if den == 0.0:
        return vol.copy()
    alpha = float(np.sum(v * reference.data.astype(np.float64))) / den
    return Volume((vol.data * np.float64(alpha)).astype(np.float32), vol.spacing)


def resample_volume(vol: Volume, target_dims: Sequence[int]) -> Volume:
    """Trilinear resample onto a grid with ``target_dims`` voxels per axis.

    Source and target grids are corner-aligned, so axis-aligned linear
    ramps keep their endpoint values. Spacing rescales by the dims ratio
    per axis.
    """
    target_dims = tuple(int(d) for d in target_dims)
    if len(target_dims) != 3 or any(d <= 0 for d in target_dims):
        raise NonPositiveDim(f"target dims must be three positive ints, got {target_dims}")

    coords = []
    for n_in, n_out in zip(vol.dims, target_dims):
        if n_out == 1:
            coords.append(np.full(1, (n_in - 1) / 2.0))
        else:
            coords.append(np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1))
    out = trilinear_sample(
        vol.data,
        coords[0][:, None, None],
        coords[1][None, :, None],
        coords[2][None, None, :],
    )
    spacing = tuple(s * n_in / n_out for s, n_in, n_out in zip(vol.spacing, vol.dims, target_dims))
    return Volume(out.astype(np.float32), spacing)


# ---------------------------------------------------------------------------
# Subject-level splitting


def split_by_subject(
    subject_ids: Sequence[str], train_fraction: float, seed: int
) -> DatasetSplit:
    """Deterministically split subject ids into train and test sides.

    The train side holds ``floor(train_fraction * n)`` subjects, clamped
    so that both sides stay nonempty. Assignment shuffles the sorted ids
    with a seeded generator, so the split depends only on the id set,
    the fraction, and the seed.
    """
    ids = list(subject_ids)
    if not ids:
        raise EmptyInput("no subject ids given")
    if len(set(ids)) != len(ids):
        raise InvalidArgument("subject ids must be unique")
    if not 0.0 < train_fraction < 1.0:
        raise DegenerateFraction(f"train fraction must lie in (0, 1), got {train_fraction}")

    n = len(ids)
    n_train = min(max(math.floor(train_fraction * n), 1), n - 1) if n > 1 else 1
    if n == 1:
        raise DegenerateFraction("cannot split a single subject into two nonempty sides")
    shuffled = np.random.default_rng(seed).permutation(sorted(ids))
    train = tuple(sorted(shuffled[:n_train].tolist()))
    test = tuple(sorted(shuffled[n_train:].tolist()))
    return DatasetSplit(train=train, test=test, seed=int(seed))
