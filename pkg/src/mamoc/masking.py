"""Exact-count block masking of cubic volumes.

A mask partitions a volume of side S into non-overlapping cubic blocks of
side B and zeroes a subset of them. The number of masked blocks is exact
for the requested keep fraction, never merely its expectation: a seeded
permutation of the block indices is thresholded at
``ceil((1 - keep_prob) * (S/B)^3)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, BadProbability, DimMismatch, IndivisibleBlock, TruncatedStream
from .volume_io import Volume

MASK_MAGIC = b"MBLK1"


@dataclass(frozen=True)
class MaskSpec:
    """Generating parameters of one block mask."""

    side: int
    block: int
    keep_prob: float
    seed: int

    def __post_init__(self):
        if self.side <= 0 or self.block <= 0:
            raise IndivisibleBlock(f"side and block must be positive, got {self.side}, {self.block}")
        if self.side % self.block != 0:
            raise IndivisibleBlock(f"block side {self.block} does not divide volume side {self.side}")
        if not 0.0 <= self.keep_prob <= 1.0:
            raise BadProbability(f"keep probability must lie in [0, 1], got {self.keep_prob}")

    @property
    def blocks_per_axis(self) -> int:
        return self.side // self.block

    @property
    def block_count(self) -> int:
        return self.blocks_per_axis ** 3

    @property
    def masked_count(self) -> int:
        return math.ceil((1.0 - self.keep_prob) * self.block_count)


@dataclass(frozen=True)
class BlockMask:
    """Kept/masked flags per block, in x-fastest block order, plus the spec
    that generated them."""

    spec: MaskSpec
    kept: np.ndarray  # bool, length blocks_per_axis**3

    @property
    def blocks_per_axis(self) -> int:
        return self.spec.blocks_per_axis

    def kept_grid(self) -> np.ndarray:
        """Kept flags reshaped to the 3D block grid, indexed [x, y, z]."""
        n = self.blocks_per_axis
        return self.kept.reshape((n, n, n), order="F")


def sample_block_mask(spec: MaskSpec) -> BlockMask:
    """Draw the block mask determined by ``spec``.

    The first ``masked_count`` entries of a seeded uniform permutation of
    the block indices are masked, so every mask of that cardinality has
    positive probability and the draw is reproducible from the seed.
    """
    perm = np.random.default_rng(spec.seed).permutation(spec.block_count)
    kept = np.ones(spec.block_count, dtype=bool)
    kept[perm[: spec.masked_count]] = False
    return BlockMask(spec=spec, kept=kept)


def mask_to_voxel_grid(mask: BlockMask, side: int | None = None) -> Volume:
    """Expand a block mask to a voxel-level 0/1 indicator volume."""
    if side is None:
        side = mask.spec.side
    if side != mask.spec.side:
        raise DimMismatch(f"mask was drawn for side {mask.spec.side}, got {side}")
    b = mask.spec.block
    grid = mask.kept_grid()
    voxels = grid.repeat(b, axis=0).repeat(b, axis=1).repeat(b, axis=2)
    return Volume(voxels.astype(np.float32))


def apply_mask(vol: Volume, mask: BlockMask) -> Volume:
    """Zero the masked blocks of a cubic volume; kept voxels pass through
    bit-for-bit."""
    s = mask.spec.side
    if vol.dims != (s, s, s):
        raise DimMismatch(f"volume dims {vol.dims} do not match mask side {s}")
    grid = mask_to_voxel_grid(mask).data
    return Volume(vol.data * grid, vol.spacing)


def mask_to_bytes(mask: BlockMask) -> bytes:
    """Serialize a mask as its generating tuple plus bit-packed kept flags."""
    header = MASK_MAGIC + struct.pack(
        "<IIdQ", mask.spec.side, mask.spec.block, mask.spec.keep_prob, mask.spec.seed
    )
    return header + np.packbits(mask.kept).tobytes()


def mask_from_bytes(raw: bytes) -> BlockMask:
    if raw[:5] != MASK_MAGIC:
        raise BadMagic("not a serialized block mask")
    side, block, keep_prob, seed = struct.unpack_from("<IIdQ", raw, 5)
    spec = MaskSpec(side=side, block=block, keep_prob=keep_prob, seed=seed)
    need = 29 + (spec.block_count + 7) // 8
    if len(raw) < need:
        raise TruncatedStream(f"mask payload needs {need} bytes, got {len(raw)}")
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8, offset=29))
    kept = bits[: spec.block_count].astype(bool)
    return BlockMask(spec=spec, kept=kept)
