"""Loss, gradients, the Lion optimizer, and the two training phases.

Phase one reconstructs clean scans from block-masked copies of
themselves; phase two feeds masked motion-affected scans and targets the
same subject's clean scan. Both phases draw a fresh keep probability per
scan, take gradients of the mean squared error over the full volume, and
apply one sign-momentum (Lion) update per batch.

A finite-difference checker provides the independent oracle for the
reverse-mode gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    BadConfig,
    BadEpsilon,
    DimMismatch,
    EmptyInput,
    MissingCleanTarget,
    ShapeMismatch,
)
from .masking import MaskSpec, apply_mask, mask_to_voxel_grid, sample_block_mask
from .network import ModelParameters, build_forward, forward_batch, make_leaves
from .volume_io import SubjectRecord, Volume

AFFECTED_TAGS = ("moderate", "heavy")


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "pretrain"
    learning_rate: float = 1e-4
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    batch_size: int = 2
    steps: int = 500
    keep_prob_range: tuple[float, float] = (0.0, 1.0)
    block_side: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise BadConfig(f"unknown phase {self.phase!r}")
        if self.learning_rate <= 0:
            raise BadConfig("learning rate must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise BadConfig("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.steps < 0:
            raise BadConfig("batch size must be >= 1 and steps >= 0")
        lo, hi = self.keep_prob_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise BadConfig(f"keep probability range {self.keep_prob_range} invalid")


@dataclass
class OptimizerState:
    """Per-parameter sign-momentum buffers plus the step counter."""

    momentum: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def initial(cls, params: ModelParameters) -> "OptimizerState":
        return cls({name: np.zeros_like(params[name]) for name in params.names()})


@dataclass(frozen=True)
class StepStats:
    """Loss breakdown of one optimization step."""

    loss: float
    masked_loss: float
    unmasked_loss: float


def l2_loss(pred: Volume | np.ndarray, target: Volume | np.ndarray) -> float:
    """Mean squared voxel difference over the full volume."""
    a = pred.data if isinstance(pred, Volume) else np.asarray(pred)
    b = target.data if isinstance(target, Volume) else np.asarray(target)
    if a.shape != b.shape:
        raise DimMismatch(f"{a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(diff * diff))


def _backward_full(
    params: ModelParameters,
    batch_inputs: Sequence[tuple[Volume, Volume]],
    batch_targets: Sequence[Volume],
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    if not batch_inputs:
        raise EmptyInput("empty batch")
    if len(batch_inputs) != len(batch_targets):
        raise ShapeMismatch("inputs and targets differ in length")
    dtype = next(iter(params.tensors.values())).dtype
    x = np.stack([inp.data for inp, _ in batch_inputs]).astype(dtype)
    m = np.stack([keep.data for _, keep in batch_inputs]).astype(dtype)
    t = np.stack([tgt.data for tgt in batch_targets]).astype(dtype)
    if x.shape != t.shape:
        raise ShapeMismatch(f"inputs {x.shape} vs targets {t.shape}")

    leaves = make_leaves(params)
    out, _ = build_forward(Tensor(x), Tensor(m), leaves, params.config)
    diff = out - Tensor(t)
    loss = ad.tmean(ad.mul(diff, diff))
    loss.backward()
    grads = {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
        for name, leaf in leaves.items()
    }
    return float(loss.data), grads, out.data


def backward(
    params: ModelParameters,
    batch_inputs: Sequence[tuple[Volume, Volume]],
    batch_targets: Sequence[Volume],
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients for a batch of (masked input, keep grid) pairs.

    Gradients are returned for every registered parameter; tensors the
    graph never touches get exact zeros.
    """
    loss, grads, _ = _backward_full(params, batch_inputs, batch_targets)
    return loss, grads


def evaluate_loss(
    params: ModelParameters,
    batch_inputs: Sequence[tuple[Volume, Volume]],
    batch_targets: Sequence[Volume],
) -> float:
    """Forward-only loss of a batch, for perturbation probes."""
    dtype = next(iter(params.tensors.values())).dtype
    x = np.stack([inp.data for inp, _ in batch_inputs]).astype(dtype)
    m = np.stack([keep.data for _, keep in batch_inputs]).astype(dtype)
    t = np.stack([tgt.data for tgt in batch_targets]).astype(dtype)
    out = forward_batch(x, m, params)
    diff = out - t
    return float(np.mean(diff * diff))


def lion_step(
    params: ModelParameters,
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    config: TrainConfig,
) -> tuple[ModelParameters, OptimizerState]:
    """One sign-momentum update, in place.

    update direction: sign(beta1 * m + (1 - beta1) * g)
    parameter:        p <- p - lr * (direction + wd * p)
    momentum:         m <- beta2 * m + (1 - beta2) * g
    """
    lr = np.float32(config.learning_rate)
    wd = np.float32(config.weight_decay)
    b1 = np.float32(config.beta1)
    b2 = np.float32(config.beta2)
    for name in params.names():
        g = np.asarray(grads[name], dtype=np.float32)
        if g.shape != params[name].shape:
            raise ShapeMismatch(f"gradient shape for {name}: {g.shape} vs {params[name].shape}")
        m = state.momentum[name]
        direction = np.sign(b1 * m + (np.float32(1.0) - b1) * g)
        params[name] = (params[name] - lr * (direction + wd * params[name])).astype(np.float32)
        state.momentum[name] = (b2 * m + (np.float32(1.0) - b2) * g).astype(np.float32)
    state.step += 1
    return params, state


def _loss_breakdown(out: np.ndarray, target: np.ndarray, keep: np.ndarray) -> tuple[float, float]:
    sq = (out.astype(np.float64) - target.astype(np.float64)) ** 2
    masked = keep == 0.0
    masked_loss = float(sq[masked].mean()) if masked.any() else 0.0
    kept_loss = float(sq[~masked].mean()) if (~masked).any() else 0.0
    return masked_loss, kept_loss


def _masked_step(
    params: ModelParameters,
    state: OptimizerState,
    inputs: Sequence[Volume],
    targets: Sequence[Volume],
    rng: np.random.Generator,
    config: TrainConfig,
) -> tuple[ModelParameters, OptimizerState, StepStats]:
    side = params.config.side
    lo, hi = config.keep_prob_range
    pairs = []
    keeps = []
    for vol in inputs:
        if vol.dims != (side, side, side):
            raise DimMismatch(f"scan dims {vol.dims} do not match model side {side}")
        keep_prob = float(rng.uniform(lo, hi))
        seed = int(rng.integers(0, 2**63))
        mask = sample_block_mask(MaskSpec(side, config.block_side, keep_prob, seed))
        pairs.append((apply_mask(vol, mask), mask_to_voxel_grid(mask)))
        keeps.append(pairs[-1][1].data)

    loss, grads, out = _backward_full(params, pairs, list(targets))
    params, state = lion_step(params, grads, state, config)
    masked_loss, kept_loss = _loss_breakdown(
        out, np.stack([t.data for t in targets]), np.stack(keeps)
    )
    return params, state, StepStats(loss=loss, masked_loss=masked_loss, unmasked_loss=kept_loss)


def pretrain_step(
    params: ModelParameters,
    state: OptimizerState,
    clean_batch: Sequence[Volume],
    rng: np.random.Generator,
    config: TrainConfig,
) -> tuple[ModelParameters, OptimizerState, StepStats]:
    """Self-supervised step: each clean scan is masked and must
    reconstruct itself."""
    if not clean_batch:
        raise EmptyInput("empty batch")
    return _masked_step(params, state, clean_batch, clean_batch, rng, config)


def finetune_step(
    params: ModelParameters,
    state: OptimizerState,
    batch: Sequence[SubjectRecord],
    rng: np.random.Generator,
    config: TrainConfig,
) -> tuple[ModelParameters, OptimizerState, StepStats]:
    """Correction step: a masked motion-affected scan must reconstruct the
    same subject's clean scan. When a record offers both severities, one
    is drawn uniformly."""
    if not batch:
        raise EmptyInput("empty batch")
    inputs: list[Volume] = []
    targets: list[Volume] = []
    for record in batch:
        if "clean" not in record.scans:
            raise MissingCleanTarget(f"subject {record.subject_id} has no clean scan")
        available = [tag for tag in AFFECTED_TAGS if tag in record.scans]
        if available:
            tag = available[int(rng.integers(0, len(available)))]
            inputs.append(record.scans[tag])
        else:
            # degenerate record: fall back to the clean scan itself
            inputs.append(record.scans["clean"])
        targets.append(record.scans["clean"])
    return _masked_step(params, state, inputs, targets, rng, config)


def finite_difference_check(
    loss_and_grad_fn: Callable[[ModelParameters], tuple[float, Mapping[str, np.ndarray]]],
    params: ModelParameters,
    eps: float,
    *,
    samples: int = 200,
    seed: int = 0,
    loss_fn: Callable[[ModelParameters], float] | None = None,
) -> float:
    """Largest relative disagreement between analytic and central-difference
    gradients over randomly sampled coordinates spanning every tensor.

    Evaluation runs in float64 regardless of the incoming parameter dtype.
    Coordinates where both sides sit below an absolute floor of 1e-6 are
    treated as agreeing: central differences of a float64 loss carry
    round-off noise near 1e-12, so relative error is meaningless for
    directions the loss does not depend on (a key-projection bias, for
    instance, is provably gradient-free under softmax attention).
    """
    if not eps > 0.0:
        raise BadEpsilon(f"eps must be positive, got {eps}")
    params64 = params.astype(np.float64)
    _, analytic = loss_and_grad_fn(params64)
    if loss_fn is None:
        loss_fn = lambda p: loss_and_grad_fn(p)[0]

    names = list(params64.names())
    rng = np.random.default_rng(seed)
    per_tensor = max(1, math.ceil(samples / len(names)))
    worst = 0.0
    for name in names:
        tensor = params64[name]
        size = tensor.size
        picks = rng.choice(size, size=min(per_tensor, size), replace=False)
        for flat in np.atleast_1d(picks):
            flat = int(flat)
            original = tensor.flat[flat]
            tensor.flat[flat] = original + eps
            loss_plus = loss_fn(params64)
            tensor.flat[flat] = original - eps
            loss_minus = loss_fn(params64)
            tensor.flat[flat] = original
            fd = (loss_plus - loss_minus) / (2.0 * eps)
            an = float(np.asarray(analytic[name]).flat[flat])
            denom = max(abs(fd), abs(an))
            if denom < 1e-6:
                continue
            worst = max(worst, abs(fd - an) / denom)
    return worst
