"""Full network assembly: stem, encoder/decoder stages of attention
blocks, patch merge/expand resampling, additive skip connections, a
bottleneck, and the output gating network.

The gate blends the (masked) input with the decoder prediction per
voxel: ``out = m*g*x + (1 - m*g)*d`` where ``m`` is the voxel-level keep
indicator and ``g`` the learned gate. Masked voxels (m = 0) therefore
pass the decoder prediction through exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    BadConfig,
    BadMagic,
    DimMismatch,
    IoFailure,
    OddChannels,
    OddSide,
    TruncatedStream,
)
from .g2l import G2LConfig, block_param_shapes, t_g2l_block
from .volume_io import Volume

CHECKPOINT_MAGIC = "MCKPT1"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    The encoder stages run at sides ``side / 2**i`` with channel widths
    ``base_channels * 2**i``; the decoder mirrors them. The bottleneck
    sits at resolution index ``depth``.
    """

    side: int = 32
    base_channels: int = 12
    depth: int = 2
    blocks_per_stage: int = 1
    window: int = 4
    heads: int = 2
    mlp_ratio: float = 4.0
    gate_hidden: int = 8

    def __post_init__(self):
        if self.side <= 0 or self.base_channels <= 0 or self.depth < 0:
            raise BadConfig("side, base_channels and depth must be positive")
        if self.blocks_per_stage < 1 or self.gate_hidden < 1:
            raise BadConfig("blocks_per_stage and gate_hidden must be at least 1")
        if self.side % (2**self.depth) != 0:
            raise BadConfig(f"side {self.side} not divisible by 2^depth={2**self.depth}")
        for i in range(self.depth + 1):
            if self.stage_side(i) % self.window != 0:
                raise BadConfig(
                    f"window {self.window} does not divide stage side {self.stage_side(i)}"
                )
            if self.stage_channels(i) % self.heads != 0:
                raise BadConfig(
                    f"heads {self.heads} do not divide stage channels {self.stage_channels(i)}"
                )

    def stage_side(self, i: int) -> int:
        return self.side // (2**i)

    def stage_channels(self, i: int) -> int:
        return self.base_channels * (2**i)

    def stage_g2l(self, i: int) -> G2LConfig:
        return G2LConfig(
            channels=self.stage_channels(i),
            window=self.window,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
        )


class ModelParameters:
    """Deterministic name -> tensor registry for every learnable array."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> Iterator[str]:
        return iter(self.tensors)

    def total_parameters(self) -> int:
        return sum(int(np.prod(t.shape)) for t in self.tensors.values())

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParameters":
        return ModelParameters(
            self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}
        )

    def equals(self, other: "ModelParameters") -> bool:
        return list(self.tensors) == list(other.tensors) and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Registry of every tensor name and shape, in construction order."""
    shapes: dict[str, tuple[int, ...]] = {}
    c0 = config.base_channels
    shapes["stem.w"] = (1, c0)
    shapes["stem.b"] = (c0,)

    def add_blocks(prefix: str, stage: int) -> None:
        for j in range(config.blocks_per_stage):
            for name, shape in block_param_shapes(config.stage_g2l(stage)).items():
                shapes[f"{prefix}.block{j}.{name}"] = shape

    for i in range(config.depth):
        c = config.stage_channels(i)
        add_blocks(f"enc{i}", i)
        shapes[f"enc{i}.merge.reduce_w"] = (8, 1)
        shapes[f"enc{i}.merge.reduce_b"] = (1,)
        shapes[f"enc{i}.merge.mix_w"] = (c, 2 * c)
        shapes[f"enc{i}.merge.mix_b"] = (2 * c,)
    add_blocks("mid", config.depth)
    for i in reversed(range(config.depth)):
        c = config.stage_channels(i)
        shapes[f"dec{i}.expand.mix_w"] = (2 * c, c)
        shapes[f"dec{i}.expand.mix_b"] = (c,)
        shapes[f"dec{i}.expand.spread_w"] = (1, 8)
        shapes[f"dec{i}.expand.spread_b"] = (8,)
        add_blocks(f"dec{i}", i)
    shapes["head.w"] = (c0, 1)
    shapes["head.b"] = (1,)
    shapes["gate.fc1_w"] = (3, config.gate_hidden)
    shapes["gate.fc1_b"] = (config.gate_hidden,)
    shapes["gate.fc2_w"] = (config.gate_hidden, 1)
    shapes["gate.fc2_b"] = (1,)
    return shapes


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    if std == 0.0:
        return np.zeros(shape, dtype=np.float32)
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(np.float32)


def init_parameters(config: ModelConfig, seed: int, std: float = 0.02) -> ModelParameters:
    """Draw fresh parameters: weights truncated normal (cut at two standard
    deviations), biases and relative-position biases at zero, layer-norm
    gains at one. The zero gate bias starts the gate near one half."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("gamma"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif leaf == "b" or leaf.endswith(("_b", "beta", "bias")):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = _truncated_normal(rng, shape, std)
    return ModelParameters(config, tensors)


# ---------------------------------------------------------------------------
# Tape builders


def t_patch_merge(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Halve the side: each 2^3 voxel group collapses to one voxel via a
    shared 8 -> 1 linear map applied per channel, then a pointwise mixer
    doubles the channels."""
    n, s, c = x.shape[0], x.shape[1], x.shape[4]
    if s % 2 != 0:
        raise OddSide(f"side {s} must be even to merge")
    h = s // 2
    x = ad.reshape(x, (n, h, 2, h, 2, h, 2, c))
    x = ad.transpose(x, (0, 1, 3, 5, 7, 2, 4, 6))  # (N, h, h, h, C, 2, 2, 2)
    x = ad.reshape(x, (n, h, h, h, c, 8))
    x = ad.add(ad.matmul(x, p["reduce_w"]), p["reduce_b"])  # (N, h, h, h, C, 1)
    x = ad.reshape(x, (n, h, h, h, c))
    return ad.linear(x, p["mix_w"], p["mix_b"])


def t_patch_expand(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Double the side: a pointwise mixer halves the channels, then a
    shared 1 -> 8 linear map scatters each voxel onto its 2^3 children."""
    n, h, c = x.shape[0], x.shape[1], x.shape[4]
    if c % 2 != 0:
        raise OddChannels(f"channels {c} must be even to expand")
    c2 = c // 2
    x = ad.linear(x, p["mix_w"], p["mix_b"])  # (N, h, h, h, C/2)
    x = ad.reshape(x, (n, h, h, h, c2, 1))
    x = ad.add(ad.matmul(x, p["spread_w"]), p["spread_b"])  # (N, h, h, h, C/2, 8)
    x = ad.transpose(x, (0, 1, 2, 3, 5, 4))
    x = ad.reshape(x, (n, h, h, h, 2, 2, 2, c2))
    x = ad.transpose(x, (0, 1, 4, 2, 5, 3, 6, 7))
    return ad.reshape(x, (n, 2 * h, 2 * h, 2 * h, c2))


def t_gate(x: Tensor, m: Tensor, d: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Blend input and prediction per voxel; masked voxels pass ``d``."""
    shape = x.shape
    feats = ad.stack([x, m, d], axis=-1)
    hidden = ad.gelu(ad.linear(feats, p["fc1_w"], p["fc1_b"]))
    g = ad.reshape(ad.sigmoid(ad.linear(hidden, p["fc2_w"], p["fc2_b"])), shape)
    mg = ad.mul(m, g)
    return ad.add(ad.mul(mg, x), ad.mul(1.0 - mg, d))


def _sub(p: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {k[len(prefix):]: v for k, v in p.items() if k.startswith(prefix)}


def build_forward(
    x: Tensor, m: Tensor, leaves: Mapping[str, Tensor], config: ModelConfig
) -> tuple[Tensor, Tensor]:
    """Build the forward graph for a batch.

    ``x`` and ``m`` are (N, S, S, S). Returns the gated output and the
    pre-gate decoder prediction, both (N, S, S, S).
    """
    n, s = x.shape[0], x.shape[1]
    if s != config.side:
        raise DimMismatch(f"input side {s} does not match configured side {config.side}")
    h = ad.linear(ad.reshape(x, (n, s, s, s, 1)), leaves["stem.w"], leaves["stem.b"])
    skips = []
    for i in range(config.depth):
        cfg = config.stage_g2l(i)
        for j in range(config.blocks_per_stage):
            h = t_g2l_block(h, _sub(leaves, f"enc{i}.block{j}."), cfg)
        skips.append(h)
        h = t_patch_merge(h, _sub(leaves, f"enc{i}.merge."))
    cfg = config.stage_g2l(config.depth)
    for j in range(config.blocks_per_stage):
        h = t_g2l_block(h, _sub(leaves, f"mid.block{j}."), cfg)
    for i in reversed(range(config.depth)):
        h = t_patch_expand(h, _sub(leaves, f"dec{i}.expand."))
        h = ad.add(h, skips[i])
        cfg = config.stage_g2l(i)
        for j in range(config.blocks_per_stage):
            h = t_g2l_block(h, _sub(leaves, f"dec{i}.block{j}."), cfg)
    d = ad.reshape(ad.linear(h, leaves["head.w"], leaves["head.b"]), (n, s, s, s))
    out = t_gate(x, m, d, _sub(leaves, "gate."))
    return out, d


def make_leaves(params: ModelParameters) -> dict[str, Tensor]:
    return {name: Tensor(arr) for name, arr in params.tensors.items()}


def forward_batch(
    x: np.ndarray, m: np.ndarray, params: ModelParameters, *, return_decoder: bool = False
):
    """No-grad batched forward on raw arrays shaped (N, S, S, S)."""
    dtype = next(iter(params.tensors.values())).dtype
    xt = Tensor(np.ascontiguousarray(x, dtype=dtype))
    mt = Tensor(np.ascontiguousarray(m, dtype=dtype))
    out, d = build_forward(xt, mt, make_leaves(params), params.config)
    if return_decoder:
        return out.data, d.data
    return out.data


def mamoc_forward(
    masked_input: Volume,
    keep_grid: Volume,
    params: ModelParameters,
    *,
    return_decoder: bool = False,
):
    """Run the network on one masked volume and its keep indicator."""
    if masked_input.dims != keep_grid.dims:
        raise DimMismatch(f"{masked_input.dims} vs {keep_grid.dims}")
    result = forward_batch(
        masked_input.data[None], keep_grid.data[None], params, return_decoder=return_decoder
    )
    if return_decoder:
        out, d = result
        return (
            Volume(out[0].astype(np.float32), masked_input.spacing),
            Volume(d[0].astype(np.float32), masked_input.spacing),
        )
    return Volume(result[0].astype(np.float32), masked_input.spacing)


def gate_forward(
    masked_input: Volume, keep_grid: Volume, decoder_out: Volume, params: ModelParameters
) -> Volume:
    """Apply only the gating network to an existing prediction."""
    if not (masked_input.dims == keep_grid.dims == decoder_out.dims):
        raise DimMismatch("gate inputs must share dims")
    leaves = make_leaves(params)
    out = t_gate(
        Tensor(masked_input.data[None]),
        Tensor(keep_grid.data[None]),
        Tensor(decoder_out.data[None]),
        _sub(leaves, "gate."),
    )
    return Volume(out.data[0].astype(np.float32), masked_input.spacing)


def patch_merge(grid: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    """Single-grid patch merge on a (s, s, s, C) array."""
    leaves = {k: Tensor(np.asarray(v)) for k, v in params.items()}
    return t_patch_merge(Tensor(np.asarray(grid)[None]), leaves).data[0]


def patch_expand(grid: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    """Single-grid patch expand on a (s, s, s, C) array."""
    leaves = {k: Tensor(np.asarray(v)) for k, v in params.items()}
    return t_patch_expand(Tensor(np.asarray(grid)[None]), leaves).data[0]


# ---------------------------------------------------------------------------
# Checkpoints: a JSON manifest line, then raw float32 little-endian payloads.


def save_checkpoint(
    path: str | Path,
    params: ModelParameters,
    *,
    phase: str,
    seed: int,
    step: int = 0,
    optimizer: Mapping[str, np.ndarray] | None = None,
) -> Path:
    """Write parameters (and optionally optimizer momenta) bit-exactly."""
    opt = dict(optimizer) if optimizer else {}
    manifest = {
        "format": CHECKPOINT_MAGIC,
        "config": asdict(params.config),
        "phase": phase,
        "seed": int(seed),
        "step": int(step),
        "tensors": [[name, list(params[name].shape)] for name in params.names()],
        "optimizer": [[name, list(t.shape)] for name, t in opt.items()],
    }
    blob = bytearray(json.dumps(manifest, sort_keys=True).encode("ascii") + b"\n")
    for name in params.names():
        blob += params[name].astype("<f4").tobytes()
    for name in opt:
        blob += opt[name].astype("<f4").tobytes()
    path = Path(path)
    try:
        path.write_bytes(bytes(blob))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


@dataclass
class Checkpoint:
    params: ModelParameters
    phase: str
    seed: int
    step: int
    optimizer: dict[str, np.ndarray]


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    newline = raw.find(b"\n")
    if newline < 0:
        raise BadMagic("missing checkpoint manifest line")
    try:
        manifest = json.loads(raw[:newline].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadMagic(f"malformed checkpoint manifest: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_MAGIC:
        raise BadMagic("not a checkpoint file")
    config = ModelConfig(**manifest["config"])

    offset = newline + 1
    payload = raw[offset:]

    def read_tensors(entries) -> dict[str, np.ndarray]:
        nonlocal payload
        out: dict[str, np.ndarray] = {}
        for name, shape in entries:
            count = int(np.prod(shape)) if shape else 1
            need = 4 * count
            if len(payload) < need:
                raise TruncatedStream(f"checkpoint payload short while reading {name}")
            out[name] = (
                np.frombuffer(payload, dtype="<f4", count=count)
                .reshape(shape)
                .astype(np.float32)
            )
            payload = payload[need:]
        return out

    tensors = read_tensors(manifest["tensors"])
    optimizer = read_tensors(manifest.get("optimizer", []))
    return Checkpoint(
        params=ModelParameters(config, tensors),
        phase=manifest["phase"],
        seed=int(manifest["seed"]),
        step=int(manifest["step"]),
        optimizer=optimizer,
    )
