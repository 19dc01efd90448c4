import numpy as np
import pytest

from mamoc import G2LConfig, FeatureGrid, g2l_block_forward, global_stage, local_attention
from mamoc import window_merge, window_partition
from mamoc.autodiff import Tensor, softmax, tsum, mul
from mamoc.errors import BadConfig, IndivisibleWindow
from mamoc.g2l import block_param_shapes, t_g2l_block


def attn_params(channels, window, heads, rng=None, zero=False):
    span = (2 * window - 1) ** 3
    if zero or rng is None:
        make = lambda shape: np.zeros(shape)
    else:
        make = lambda shape: rng.standard_normal(shape) * 0.3
    params = {}
    for name in ("q", "k", "v", "out"):
        params[f"{name}_w"] = make((channels, channels))
        params[f"{name}_b"] = make((channels,))
    params["rel_bias"] = make((span, heads))
    return params


def block_params(cfg, rng=None, zero=False):
    shapes = block_param_shapes(cfg)
    out = {}
    for name, shape in shapes.items():
        if name.endswith("gamma"):
            out[name] = np.ones(shape)
        elif zero or rng is None:
            out[name] = np.zeros(shape)
        else:
            out[name] = rng.standard_normal(shape) * 0.3
    return out


class TestWindows:
    def test_partition_counts(self, rng):
        grid = rng.standard_normal((8, 8, 8, 3))
        windows = window_partition(grid, 4)
        assert windows.shape == (8, 64, 3)

    def test_whole_grid_window(self, rng):
        grid = rng.standard_normal((4, 4, 4, 2))
        windows = window_partition(grid, 4)
        assert windows.shape == (1, 64, 2)

    def test_merge_inverts_partition_bitwise(self, rng):
        grid = rng.standard_normal((8, 8, 8, 5)).astype(np.float32)
        assert np.array_equal(window_merge(window_partition(grid, 2)), grid)

    def test_indivisible_window(self, rng):
        with pytest.raises(IndivisibleWindow):
            window_partition(rng.standard_normal((6, 6, 6, 2)), 4)

    def test_feature_grid_validation(self, rng):
        FeatureGrid(rng.standard_normal((4, 4, 4, 2)))
        with pytest.raises(Exception):
            FeatureGrid(rng.standard_normal((4, 5, 4, 2)))


class TestLocalAttention:
    def test_uniform_attention_gives_window_mean(self, rng):
        channels, window, heads = 4, 2, 2
        params = attn_params(channels, window, heads, zero=True)
        params["v_w"] = np.eye(channels)
        params["out_w"] = np.eye(channels)
        windows = rng.standard_normal((3, window**3, channels))
        out = local_attention(windows, params)
        expected = np.broadcast_to(windows.mean(axis=1, keepdims=True), windows.shape)
        assert np.allclose(out, expected, atol=1e-6)

    def test_single_token_window(self, rng):
        channels = 3
        params = attn_params(channels, 1, 1, rng=rng)
        token = rng.standard_normal((5, 1, channels))
        out = local_attention(token, params)
        v = token @ params["v_w"] + params["v_b"]
        expected = v @ params["out_w"] + params["out_b"]
        assert np.allclose(out, expected, atol=1e-6)

    def test_windows_are_independent(self, rng):
        channels, window, heads = 4, 2, 2
        params = attn_params(channels, window, heads, rng=rng)
        windows = rng.standard_normal((4, 8, channels))
        base = local_attention(windows, params)
        poked = windows.copy()
        poked[2, 3, 1] += 1.0
        out = local_attention(poked, params)
        untouched = [0, 1, 3]
        assert np.array_equal(out[untouched], base[untouched])
        assert not np.allclose(out[2], base[2])

    def test_softmax_rows_sum_to_one(self, rng):
        logits = Tensor(rng.standard_normal((6, 9)) * 5.0)
        y = softmax(logits)
        assert np.allclose(y.data.sum(axis=-1), 1.0, atol=1e-6)


class TestGlobalStage:
    def test_single_window_adds_per_channel_constant(self, rng):
        channels, side = 3, 4
        params = attn_params(channels, side, 1, rng=rng)
        del params["rel_bias"]
        grid = rng.standard_normal((side, side, side, channels))
        out = global_stage(grid, params, window=side, heads=1)
        delta = out - grid
        flat = delta.reshape(-1, channels)
        assert np.allclose(flat, flat[0], atol=1e-6)

    def test_zero_broadcast_projection_is_identity(self, rng):
        channels = 4
        params = attn_params(channels, 2, 2, rng=rng)
        del params["rel_bias"]
        params["out_w"] = np.zeros((channels, channels))
        params["out_b"] = np.zeros(channels)
        grid = rng.standard_normal((4, 4, 4, channels)).astype(np.float32)
        out = global_stage(grid, params, window=2, heads=2)
        assert np.array_equal(out, grid)

    def test_window_permutation_equivariance(self, rng):
        channels, window, heads, side = 4, 2, 2, 4
        params = attn_params(channels, window, heads, rng=rng)
        del params["rel_bias"]
        grid = rng.standard_normal((side, side, side, channels))
        base = window_partition(global_stage(grid, params, window, heads), window)
        perm = rng.permutation(window_partition(grid, window).shape[0])
        permuted_grid = window_merge(window_partition(grid, window)[perm])
        out = window_partition(global_stage(permuted_grid, params, window, heads), window)
        assert np.allclose(out, base[perm], atol=1e-5)


class TestBlock:
    def test_zero_projections_make_identity(self, rng):
        cfg = G2LConfig(channels=4, window=2, heads=2)
        params = block_params(cfg, zero=True)
        grid = rng.standard_normal((4, 4, 4, 4)).astype(np.float32)
        out = g2l_block_forward(grid, params, cfg)
        assert np.array_equal(out, grid)

    @pytest.mark.parametrize("side", [4, 8, 16])
    def test_shape_preserved(self, rng, side):
        cfg = G2LConfig(channels=4, window=4, heads=2)
        params = block_params(cfg, rng=rng)
        grid = rng.standard_normal((side, side, side, 4))
        out = g2l_block_forward(grid, params, cfg)
        assert out.shape == grid.shape
        assert np.isfinite(out).all()

    def test_full_block_window_permutation_equivariance(self, rng):
        cfg = G2LConfig(channels=4, window=2, heads=2)
        params = block_params(cfg, rng=rng)
        grid = rng.standard_normal((4, 4, 4, 4))
        base = window_partition(g2l_block_forward(grid, params, cfg), 2)
        perm = rng.permutation(8)
        permuted = window_merge(window_partition(grid, 2)[perm])
        out = window_partition(g2l_block_forward(permuted, params, cfg), 2)
        assert np.allclose(out, base[perm], atol=1e-5)

    def test_heads_must_divide_channels(self):
        with pytest.raises(BadConfig):
            G2LConfig(channels=6, window=2, heads=4)

    def test_gradient_matches_finite_differences(self, rng):
        # central differences at eps=1e-5 in float64 on a 4^3 grid, C=8, H=2
        cfg = G2LConfig(channels=8, window=2, heads=2, mlp_ratio=2.0)
        params = block_params(cfg, rng=rng)
        grid = rng.standard_normal((1, 4, 4, 4, 8))
        probe = rng.standard_normal((1, 4, 4, 4, 8))
        names = sorted(params)

        def loss_value(p_arrays):
            tensors = {k: Tensor(v) for k, v in p_arrays.items()}
            out = t_g2l_block(Tensor(grid), tensors, cfg)
            return tsum(mul(out, Tensor(probe)))

        tensors = {k: Tensor(v.copy()) for k, v in params.items()}
        out = t_g2l_block(Tensor(grid), tensors, cfg)
        loss = tsum(mul(out, Tensor(probe)))
        loss.backward()

        eps = 1e-5
        worst = 0.0
        for name in names:
            arr = params[name]
            analytic = tensors[name].grad
            if analytic is None:
                analytic = np.zeros_like(arr)
            picks = rng.choice(arr.size, size=min(4, arr.size), replace=False)
            for flat in np.atleast_1d(picks):
                flat = int(flat)
                orig = arr.flat[flat]
                arr.flat[flat] = orig + eps
                lp = float(loss_value(params).data)
                arr.flat[flat] = orig - eps
                lm = float(loss_value(params).data)
                arr.flat[flat] = orig
                fd = (lp - lm) / (2 * eps)
                an = float(analytic.flat[flat])
                denom = max(abs(fd), abs(an))
                if denom > 1e-6:
                    worst = max(worst, abs(fd - an) / denom)
        assert worst < 1e-4
