import numpy as np
import pytest

from mamoc import (
    MaskSpec,
    ModelConfig,
    ModelParameters,
    OptimizerState,
    SubjectRecord,
    TrainConfig,
    Volume,
    apply_mask,
    backward,
    finetune_step,
    finite_difference_check,
    init_parameters,
    l2_loss,
    lion_step,
    mask_to_voxel_grid,
    pretrain_step,
    sample_block_mask,
)
from mamoc import autodiff as ad
from mamoc.autodiff import Tensor
from mamoc.errors import BadEpsilon, DimMismatch, MissingCleanTarget
from mamoc.forge import PhantomSpec, generate_phantom, make_paired_dataset
from mamoc.training import evaluate_loss
from mamoc.volume_io import resample_volume

TINY = ModelConfig(side=8, base_channels=4, depth=1, blocks_per_stage=1, window=2, heads=2, gate_hidden=4)
SMALL = ModelConfig(side=16, base_channels=8, depth=2, blocks_per_stage=1, window=4, heads=2, gate_hidden=8)


def masked_batch(rng, params, n=1):
    side = params.config.side
    batch, targets = [], []
    for i in range(n):
        vol = Volume(rng.random((side, side, side), dtype=np.float32))
        tgt = Volume(rng.random((side, side, side), dtype=np.float32))
        mask = sample_block_mask(MaskSpec(side, 2, 0.5, seed=i))
        batch.append((apply_mask(vol, mask), mask_to_voxel_grid(mask)))
        targets.append(tgt)
    return batch, targets


class TestLoss:
    def test_zero_when_equal(self, rng):
        vol = Volume(rng.random((4, 4, 4), dtype=np.float32))
        assert l2_loss(vol, vol) == 0.0

    def test_constant_gap(self):
        a = Volume(np.zeros((4, 4, 4), dtype=np.float32))
        b = Volume(np.full((4, 4, 4), 0.1, dtype=np.float32))
        assert abs(l2_loss(a, b) - 0.01) < 1e-9

    def test_symmetric(self, rng):
        a = Volume(rng.random((4, 4, 4), dtype=np.float32))
        b = Volume(rng.random((4, 4, 4), dtype=np.float32))
        assert l2_loss(a, b) == l2_loss(b, a)

    def test_dim_mismatch(self, rng):
        with pytest.raises(DimMismatch):
            l2_loss(Volume(np.zeros((2, 2, 2), dtype=np.float32)),
                    Volume(np.zeros((3, 3, 3), dtype=np.float32)))


class TestBackward:
    def test_loss_matches_forward_loss(self, rng):
        params = init_parameters(TINY, seed=0)
        batch, targets = masked_batch(rng, params)
        loss, _ = backward(params, batch, targets)
        assert abs(loss - evaluate_loss(params, batch, targets)) < 1e-10

    def test_unused_parameter_gets_exact_zero_gradient(self, rng):
        params = init_parameters(TINY, seed=0)
        params.tensors["orphan.w"] = np.ones((3, 3), dtype=np.float32)
        batch, targets = masked_batch(rng, params)
        _, grads = backward(params, batch, targets)
        assert np.all(grads["orphan.w"] == 0.0)

    def test_doubling_loss_scale_doubles_gradients(self, rng):
        w = Tensor(rng.standard_normal((4, 3)))
        x = Tensor(rng.standard_normal((5, 4)))
        base = ad.tmean(ad.mul(ad.matmul(x, w), ad.matmul(x, w)))
        base.backward()
        g1 = w.grad.copy()
        w2 = Tensor(w.data.copy())
        doubled = ad.tmean(ad.mul(ad.matmul(x, w2), ad.matmul(x, w2))) * 2.0
        doubled.backward()
        assert np.allclose(w2.grad, 2.0 * g1, atol=1e-12)

    def test_gradients_vanish_at_exact_minimum(self, rng):
        params = init_parameters(TINY, seed=1)
        batch, _ = masked_batch(rng, params)
        from mamoc.network import forward_batch

        out = forward_batch(batch[0][0].data[None], batch[0][1].data[None], params)
        reachable = [Volume(out[0])]
        _, grads = backward(params, batch, reachable)
        total = sum(float(np.abs(g).sum()) for g in grads.values())
        assert total == 0.0

    def test_matches_finite_differences_on_small_model(self, rng):
        params = init_parameters(TINY, seed=2)
        batch, targets = masked_batch(rng, params)
        err = finite_difference_check(
            lambda p: backward(p, batch, targets),
            params,
            1e-5,
            samples=120,
            seed=0,
            loss_fn=lambda p: evaluate_loss(p, batch, targets),
        )
        assert err < 1e-4


class TestLion:
    def cfg(self, **kw):
        defaults = dict(phase="pretrain", learning_rate=0.1, weight_decay=0.0,
                        beta1=0.9, beta2=0.99, batch_size=1, steps=1)
        defaults.update(kw)
        return TrainConfig(**defaults)

    def make_params(self, value):
        params = ModelParameters(TINY, {"p": np.array([value], dtype=np.float32)})
        return params, OptimizerState.initial(params)

    def test_zero_gradient_zero_momentum_is_noop(self):
        params, state = self.make_params(1.0)
        lion_step(params, {"p": np.zeros(1, dtype=np.float32)}, state, self.cfg())
        assert params["p"][0] == 1.0

    def test_sign_invariance_to_gradient_scale(self):
        a, state_a = self.make_params(1.0)
        b, state_b = self.make_params(1.0)
        lion_step(a, {"p": np.array([0.3], dtype=np.float32)}, state_a, self.cfg())
        lion_step(b, {"p": np.array([3.0], dtype=np.float32)}, state_b, self.cfg())
        assert a["p"][0] == b["p"][0]

    def test_hand_case(self):
        # p=1, g=+1, m=0, lr=0.1, wd=0, beta1=0.9 -> p' = 1 - 0.1*sign(0.1) = 0.9
        params, state = self.make_params(1.0)
        lion_step(params, {"p": np.array([1.0], dtype=np.float32)}, state, self.cfg())
        assert abs(params["p"][0] - 0.9) < 1e-7
        # momentum: 0.99*0 + 0.01*1
        assert abs(state.momentum["p"][0] - 0.01) < 1e-8

    def test_update_magnitude_bound(self, rng):
        params = init_parameters(TINY, seed=3)
        state = OptimizerState.initial(params)
        grads = {n: rng.standard_normal(params[n].shape).astype(np.float32)
                 for n in params.names()}
        before = {n: params[n].copy() for n in params.names()}
        cfg = self.cfg(learning_rate=0.01, weight_decay=0.1)
        lion_step(params, grads, state, cfg)
        for name in params.names():
            delta = np.abs(params[name] - before[name])
            bound = cfg.learning_rate * (1.0 + cfg.weight_decay * np.abs(before[name]).max())
            assert float(delta.max()) <= bound + 1e-7

    def test_weight_decay_pulls_toward_zero(self):
        params, state = self.make_params(2.0)
        cfg = self.cfg(learning_rate=0.1, weight_decay=0.5)
        lion_step(params, {"p": np.zeros(1, dtype=np.float32)}, state, cfg)
        # update: -lr * (sign(0) + wd * 2.0) = -0.1
        assert abs(params["p"][0] - 1.9) < 1e-7


class TestPretrainStep:
    def test_deterministic_trajectories(self, rng):
        spec = PhantomSpec(side=16)
        vols = [resample_volume(generate_phantom(PhantomSpec(side=16, seed=s))[0], (16, 16, 16))
                for s in range(2)]
        losses = []
        for _ in range(2):
            params = init_parameters(SMALL, seed=0)
            state = OptimizerState.initial(params)
            cfg = TrainConfig(phase="pretrain", batch_size=2, steps=3)
            run = []
            for step in range(3):
                srng = np.random.default_rng([cfg.seed, step])
                params, state, stats = pretrain_step(params, state, vols, srng, cfg)
                run.append(stats.loss)
            losses.append(run)
        assert losses[0] == losses[1]

    def test_batch_of_identical_scans_matches_mean_of_equals(self, rng):
        vol = generate_phantom(PhantomSpec(side=16, seed=1))[0]
        cfg = TrainConfig(phase="pretrain", batch_size=2, steps=1)
        params = init_parameters(SMALL, seed=0)
        state = OptimizerState.initial(params)
        srng = np.random.default_rng(0)
        # identical inputs but fresh masks per scan; loss is the mean over scans
        params, state, stats = pretrain_step(params, state, [vol, vol], srng, cfg)
        assert np.isfinite(stats.loss)
        assert stats.loss > 0

    def test_overfit_run_shrinks_loss(self):
        phantoms = [generate_phantom(PhantomSpec(side=16, seed=s))[0] for s in range(4)]
        params = init_parameters(SMALL, seed=0)
        state = OptimizerState.initial(params)
        cfg = TrainConfig(phase="pretrain", batch_size=4, steps=150, learning_rate=3e-4)
        first = None
        for step in range(cfg.steps):
            srng = np.random.default_rng([cfg.seed, step])
            params, state, stats = pretrain_step(params, state, phantoms, srng, cfg)
            if first is None:
                first = stats.loss
        # average the last 10 steps to smooth over per-step mask draws
        tail = []
        for step in range(cfg.steps, cfg.steps + 10):
            srng = np.random.default_rng([cfg.seed, step])
            params, state, stats = pretrain_step(params, state, phantoms, srng, cfg)
            tail.append(stats.loss)
        assert float(np.mean(tail)) < 0.2 * first


class TestFinetuneStep:
    def make_records(self, n=2, side=16):
        records = make_paired_dataset(n, PhantomSpec(side=side), seed=4)
        return records

    def test_requires_clean_scan(self, rng):
        records = self.make_records(1)
        del records[0].scans["clean"]
        params = init_parameters(SMALL, seed=0)
        state = OptimizerState.initial(params)
        cfg = TrainConfig(phase="finetune", batch_size=1, steps=1)
        with pytest.raises(MissingCleanTarget):
            finetune_step(params, state, records, np.random.default_rng(0), cfg)

    def test_degenerate_records_reduce_to_pretraining(self):
        vol = generate_phantom(PhantomSpec(side=16, seed=9))[0]
        record = SubjectRecord(subject_id="s0", scans={"clean": vol})
        cfg = TrainConfig(phase="finetune", batch_size=1, steps=1)

        params_a = init_parameters(SMALL, seed=0)
        state_a = OptimizerState.initial(params_a)
        _, _, stats_a = finetune_step(params_a, state_a, [record], np.random.default_rng(5), cfg)

        params_b = init_parameters(SMALL, seed=0)
        state_b = OptimizerState.initial(params_b)
        _, _, stats_b = pretrain_step(params_b, state_b, [vol], np.random.default_rng(5), cfg)

        assert stats_a.loss == stats_b.loss
        assert params_a.equals(params_b)

    def test_determinism(self):
        records = self.make_records(2)
        results = []
        for _ in range(2):
            params = init_parameters(SMALL, seed=0)
            state = OptimizerState.initial(params)
            cfg = TrainConfig(phase="finetune", batch_size=2, steps=1, seed=8)
            srng = np.random.default_rng([cfg.seed, 0])
            _, _, stats = finetune_step(params, state, records, srng, cfg)
            results.append(stats.loss)
        assert results[0] == results[1]

    def test_finetuning_improves_training_pair_psnr(self):
        from mamoc import InferenceConfig, correct_scan, psnr

        records = self.make_records(4, side=16)
        params = init_parameters(SMALL, seed=0)
        state = OptimizerState.initial(params)
        cfg = TrainConfig(phase="finetune", batch_size=4, steps=200, learning_rate=3e-4)
        for step in range(cfg.steps):
            srng = np.random.default_rng([cfg.seed, step])
            params, state, _ = finetune_step(params, state, records, srng, cfg)

        icfg = InferenceConfig(keep_prob=0.6, passes=4, seed=0, block_side=2)
        gains = []
        for record in records:
            clean = record.scans["clean"]
            peak = float(clean.data.max())
            for tag in ("moderate", "heavy"):
                corrected = correct_scan(record.scans[tag], params, icfg)
                gains.append(psnr(corrected, clean, peak) - psnr(record.scans[tag], clean, peak))
        assert float(np.mean(gains)) > 0.0


class TestFiniteDifferenceCheck:
    def test_pure_linear_layer_is_exact(self, rng):
        x = rng.standard_normal((6, 3))
        y = rng.standard_normal((6, 2))
        params = ModelParameters(TINY, {
            "w": rng.standard_normal((3, 2)).astype(np.float32),
            "b": rng.standard_normal(2).astype(np.float32),
        })

        def fn(p):
            w = Tensor(p["w"])
            b = Tensor(p["b"])
            pred = ad.add(ad.matmul(Tensor(x.astype(p["w"].dtype)), w), b)
            diff = pred - Tensor(y.astype(p["w"].dtype))
            loss = ad.tmean(ad.mul(diff, diff))
            loss.backward()
            return float(loss.data), {"w": w.grad, "b": b.grad}

        err = finite_difference_check(fn, params, 1e-6, samples=10, seed=0)
        assert err < 1e-8

    def test_zero_eps_rejected(self, rng):
        params = init_parameters(TINY, seed=0)
        with pytest.raises(BadEpsilon):
            finite_difference_check(lambda p: (0.0, {}), params, 0.0)
