import math

import numpy as np
import pytest
from scipy import stats

from mamoc import (
    BlockMask,
    MaskSpec,
    Volume,
    apply_mask,
    mask_from_bytes,
    mask_to_bytes,
    mask_to_voxel_grid,
    sample_block_mask,
)
from mamoc.errors import BadProbability, DimMismatch, IndivisibleBlock


class TestCardinality:
    def test_paper_scale_counts(self):
        mask = sample_block_mask(MaskSpec(256, 16, 0.6, seed=0))
        assert int((~mask.kept).sum()) == 1639
        assert mask.kept.size == 4096

    def test_keep_everything(self):
        mask = sample_block_mask(MaskSpec(16, 4, 1.0, seed=0))
        assert int((~mask.kept).sum()) == 0

    def test_third_kept_case(self):
        mask = sample_block_mask(MaskSpec(32, 4, 0.7, seed=0))
        assert mask.kept.size == 512
        assert int((~mask.kept).sum()) == 154

    def test_exactness_over_many_random_specs(self, rng):
        for _ in range(500):
            side = int(rng.choice([8, 16, 32]))
            divisors = [b for b in range(1, side + 1) if side % b == 0]
            block = int(rng.choice(divisors))
            keep = float(rng.uniform(0.0, 1.0))
            spec = MaskSpec(side, block, keep, int(rng.integers(0, 2**32)))
            mask = sample_block_mask(spec)
            expected = math.ceil((1.0 - keep) * (side // block) ** 3)
            assert int((~mask.kept).sum()) == expected


class TestDeterminismAndUniformity:
    def test_same_seed_same_mask(self):
        spec = MaskSpec(16, 4, 0.5, seed=77)
        assert np.array_equal(sample_block_mask(spec).kept, sample_block_mask(spec).kept)

    def test_distinct_seeds_differ(self):
        a = sample_block_mask(MaskSpec(16, 2, 0.5, seed=1))
        b = sample_block_mask(MaskSpec(16, 2, 0.5, seed=2))
        assert not np.array_equal(a.kept, b.kept)

    def test_block_selection_frequencies_look_uniform(self):
        # 64 blocks, exactly 32 masked per draw; chi-square across 2000 seeds
        counts = np.zeros(64)
        for seed in range(2000):
            mask = sample_block_mask(MaskSpec(8, 2, 0.5, seed=seed))
            counts += ~mask.kept
        _, p_value = stats.chisquare(counts)
        assert p_value > 1e-3


class TestApply:
    def test_all_kept_is_identity(self, rng):
        vol = Volume(rng.standard_normal((8, 8, 8)).astype(np.float32))
        mask = sample_block_mask(MaskSpec(8, 2, 1.0, seed=0))
        assert np.array_equal(apply_mask(vol, mask).data, vol.data)

    def test_all_masked_is_zero(self, rng):
        vol = Volume(rng.standard_normal((8, 8, 8)).astype(np.float32))
        mask = sample_block_mask(MaskSpec(8, 2, 0.0, seed=0))
        assert np.all(apply_mask(vol, mask).data == 0.0)

    def test_single_masked_block_removes_block_volume(self):
        spec = MaskSpec(8, 2, 0.9, seed=0)  # ceil(0.1 * 64) = 7 masked
        mask = sample_block_mask(spec)
        n_masked = int((~mask.kept).sum())
        vol = Volume(np.ones((8, 8, 8), dtype=np.float32))
        out = apply_mask(vol, mask)
        assert float(vol.data.sum() - out.data.sum()) == n_masked * 2**3

    def test_idempotent(self, rng):
        vol = Volume(rng.standard_normal((8, 8, 8)).astype(np.float32))
        mask = sample_block_mask(MaskSpec(8, 4, 0.4, seed=5))
        once = apply_mask(vol, mask)
        twice = apply_mask(once, mask)
        assert np.array_equal(once.data, twice.data)

    def test_equals_elementwise_product_with_voxel_grid(self, rng):
        for seed in range(10):
            vol = Volume(rng.standard_normal((8, 8, 8)).astype(np.float32))
            mask = sample_block_mask(MaskSpec(8, 2, float(rng.uniform()), seed=seed))
            grid = mask_to_voxel_grid(mask)
            assert np.array_equal(apply_mask(vol, mask).data, vol.data * grid.data)

    def test_dim_mismatch(self, rng):
        vol = Volume(rng.standard_normal((4, 4, 4)).astype(np.float32))
        with pytest.raises(DimMismatch):
            apply_mask(vol, sample_block_mask(MaskSpec(8, 2, 0.5, seed=0)))


class TestVoxelGrid:
    def test_all_kept_is_ones(self):
        grid = mask_to_voxel_grid(sample_block_mask(MaskSpec(8, 2, 1.0, seed=0)))
        assert np.all(grid.data == 1.0)

    def test_all_masked_is_zeros(self):
        grid = mask_to_voxel_grid(sample_block_mask(MaskSpec(8, 2, 0.0, seed=0)))
        assert np.all(grid.data == 0.0)

    def test_sum_counts_kept_voxels(self):
        mask = sample_block_mask(MaskSpec(8, 2, 0.55, seed=3))
        kept_blocks = int(mask.kept.sum())
        grid = mask_to_voxel_grid(mask)
        assert float(grid.data.sum()) == kept_blocks * 2**3

    def test_block_constant(self):
        mask = sample_block_mask(MaskSpec(8, 4, 0.5, seed=1))
        grid = mask_to_voxel_grid(mask).data
        for bx in range(2):
            for by in range(2):
                for bz in range(2):
                    block = grid[bx * 4 : (bx + 1) * 4, by * 4 : (by + 1) * 4, bz * 4 : (bz + 1) * 4]
                    assert block.min() == block.max()

    def test_kept_order_is_x_fastest(self):
        # block index 1 must map to the block at x=1, y=0, z=0
        spec = MaskSpec(4, 2, 0.5, seed=0)
        kept = np.ones(8, dtype=bool)
        kept[1] = False
        grid = mask_to_voxel_grid(BlockMask(spec=spec, kept=kept)).data
        assert grid[2, 0, 0] == 0.0 and grid[3, 1, 1] == 0.0
        assert grid[0, 0, 0] == 1.0 and grid[0, 2, 0] == 1.0


class TestSpecValidation:
    def test_indivisible_block(self):
        with pytest.raises(IndivisibleBlock):
            MaskSpec(10, 3, 0.5, seed=0)

    def test_bad_probability(self):
        with pytest.raises(BadProbability):
            MaskSpec(8, 2, 1.5, seed=0)
        with pytest.raises(BadProbability):
            MaskSpec(8, 2, -0.1, seed=0)


class TestSerialization:
    def test_roundtrip(self, rng):
        for seed in range(20):
            spec = MaskSpec(16, 4, float(rng.uniform()), seed=seed)
            mask = sample_block_mask(spec)
            back = mask_from_bytes(mask_to_bytes(mask))
            assert back.spec == mask.spec
            assert np.array_equal(back.kept, mask.kept)
