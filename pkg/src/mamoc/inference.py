"""Masked test-time prediction.

A scan is corrected by running several forward passes, each on an
independently block-masked copy at a fixed keep probability, and
averaging the predictions in fixed index order. Evaluating the masked
copies as one batch gives the same result up to floating-point
reduction differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadConfig, BadProbability, DimMismatch
from .masking import MaskSpec, apply_mask, mask_to_voxel_grid, sample_block_mask
from .network import ModelParameters, forward_batch
from .volume_io import Volume


@dataclass(frozen=True)
class InferenceConfig:
    keep_prob: float = 0.6
    passes: int = 8
    seed: int = 0
    block_side: int = 4

    def __post_init__(self):
        if not 0.0 <= self.keep_prob <= 1.0:
            raise BadProbability(f"keep probability must lie in [0, 1], got {self.keep_prob}")
        if self.passes < 1:
            raise BadConfig(f"passes must be at least 1, got {self.passes}")
        if self.block_side < 1:
            raise BadConfig("block side must be at least 1")


def _pass_inputs(vol: Volume, cfg: InferenceConfig, index: int) -> tuple[Volume, Volume]:
    spec = MaskSpec(vol.dims[0], cfg.block_side, cfg.keep_prob, cfg.seed ^ index)
    mask = sample_block_mask(spec)
    return apply_mask(vol, mask), mask_to_voxel_grid(mask)


def _check_dims(vol: Volume, params: ModelParameters) -> None:
    side = params.config.side
    if vol.dims != (side, side, side):
        raise DimMismatch(f"scan dims {vol.dims} do not match model side {side}")


def correct_scan(vol: Volume, params: ModelParameters, cfg: InferenceConfig) -> Volume:
    """Average the predictions of ``cfg.passes`` masked passes.

    Pass ``i`` uses the mask seeded with ``cfg.seed ^ i`` (i counts from
    one), and the accumulation runs in pass order, so the output is a
    pure function of the inputs and the config.
    """
    _check_dims(vol, params)
    acc: np.ndarray | None = None
    for i in range(1, cfg.passes + 1):
        masked, keep = _pass_inputs(vol, cfg, i)
        out = forward_batch(masked.data[None], keep.data[None], params)[0]
        acc = out if acc is None else acc + out
    mean = acc / np.float32(cfg.passes)
    return Volume(mean.astype(np.float32), vol.spacing)


def correct_batchlike(vol: Volume, params: ModelParameters, cfg: InferenceConfig) -> Volume:
    """Run the same passes as one batched forward and average over the
    batch axis."""
    _check_dims(vol, params)
    masked = []
    keeps = []
    for i in range(1, cfg.passes + 1):
        mv, kv = _pass_inputs(vol, cfg, i)
        masked.append(mv.data)
        keeps.append(kv.data)
    outs = forward_batch(np.stack(masked), np.stack(keeps), params)
    return Volume(outs.mean(axis=0).astype(np.float32), vol.spacing)
