"""Global-to-local windowed attention blocks.

Each block couples every voxel to every window in a single layer: a
global stage mean-pools each window to one token, runs full multi-head
attention over the pooled tokens (no positional encoding), and
broadcast-adds each window's updated token back to its voxels; a local
stage then runs windowed multi-head self-attention with a relative
position bias shared across windows, followed by a tokenwise MLP. The
local attention and the MLP are pre-layer-normalized residual branches.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import BadConfig, IndivisibleWindow, InvalidArgument, ShapeMismatch


@dataclass(frozen=True)
class G2LConfig:
    channels: int
    window: int
    heads: int
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.channels <= 0 or self.window <= 0 or self.heads <= 0:
            raise BadConfig("channels, window and heads must be positive")
        if self.channels % self.heads != 0:
            raise BadConfig(f"heads {self.heads} must divide channels {self.channels}")
        if self.mlp_ratio <= 0:
            raise BadConfig("mlp_ratio must be positive")


@dataclass(eq=False)
class FeatureGrid:
    """Cubic grid of per-voxel feature vectors, indexed [x, y, z, channel]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 4 or not (arr.shape[0] == arr.shape[1] == arr.shape[2]):
            raise InvalidArgument(f"feature grid must be cubic, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise InvalidArgument("feature grid contains non-finite values")
        self.data = arr

    @property
    def side(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[3]


@lru_cache(maxsize=None)
def relative_position_index(window: int) -> np.ndarray:
    """(T, T) index into the (2W-1)^3 relative-offset bias table.

    Token order within a window flattens (x, y, z) with z fastest.
    """
    r = np.arange(window)
    coords = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    delta = coords[:, None, :] - coords[None, :, :] + (window - 1)
    span = 2 * window - 1
    return (delta[..., 0] * span + delta[..., 1]) * span + delta[..., 2]


# ---------------------------------------------------------------------------
# Tape builders. All take batch-first tensors: grids are (N, s, s, s, C),
# window stacks are (N, nW, T, C) with T = window**3.


def t_window_partition(x: Tensor, window: int) -> Tensor:
    n, s, c = x.shape[0], x.shape[1], x.shape[4]
    if s % window != 0:
        raise IndivisibleWindow(f"window {window} does not divide side {s}")
    blocks = s // window
    x = ad.reshape(x, (n, blocks, window, blocks, window, blocks, window, c))
    x = ad.transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
    return ad.reshape(x, (n, blocks**3, window**3, c))


def t_window_merge(x: Tensor, side: int, window: int) -> Tensor:
    n, c = x.shape[0], x.shape[3]
    blocks = side // window
    x = ad.reshape(x, (n, blocks, blocks, blocks, window, window, window, c))
    x = ad.transpose(x, (0, 1, 4, 2, 5, 3, 6, 7))
    return ad.reshape(x, (n, side, side, side, c))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(N, nW, T, C) -> (N, nW, H, T, C/H)"""
    n, nw, t, c = x.shape
    x = ad.reshape(x, (n, nw, t, heads, c // heads))
    return ad.transpose(x, (0, 1, 3, 2, 4))


def _join_heads(x: Tensor) -> Tensor:
    n, nw, h, t, d = x.shape
    x = ad.transpose(x, (0, 1, 3, 2, 4))
    return ad.reshape(x, (n, nw, t, h * d))


def t_local_attention(xw: Tensor, p: dict[str, Tensor], heads: int, window: int) -> Tensor:
    """Multi-head self-attention applied independently inside each window."""
    c = xw.shape[-1]
    # fold the score scale into q, which is far smaller than the score tensor
    scale = (c // heads) ** -0.5
    q = _split_heads(ad.linear(xw, p["q_w"], p["q_b"]) * scale, heads)
    k = _split_heads(ad.linear(xw, p["k_w"], p["k_b"]), heads)
    v = _split_heads(ad.linear(xw, p["v_w"], p["v_b"]), heads)
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 2, 4, 3)))
    bias = ad.transpose(ad.take(p["rel_bias"], relative_position_index(window)), (2, 0, 1))
    attn = ad.softmax_add(scores, bias)
    out = _join_heads(ad.matmul(attn, v))
    return ad.linear(out, p["out_w"], p["out_b"])


def t_global_stage(x: Tensor, p: dict[str, Tensor], window: int, heads: int) -> Tensor:
    """Pooled-window attention, broadcast-added back onto the grid."""
    side, c = x.shape[1], x.shape[4]
    xw = t_window_partition(x, window)
    pooled = ad.tmean(xw, axis=2)  # (N, nW, C)

    def heads_in(t: Tensor) -> Tensor:
        n, nw, _ = t.shape
        return ad.transpose(ad.reshape(t, (n, nw, heads, c // heads)), (0, 2, 1, 3))

    q = heads_in(ad.linear(pooled, p["q_w"], p["q_b"]) * ((c // heads) ** -0.5))
    k = heads_in(ad.linear(pooled, p["k_w"], p["k_b"]))
    v = heads_in(ad.linear(pooled, p["v_w"], p["v_b"]))
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
    attn = ad.softmax(scores)
    mixed = ad.matmul(attn, v)  # (N, H, nW, dh)
    n, nw = pooled.shape[0], pooled.shape[1]
    mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (n, nw, c))
    update = ad.linear(mixed, p["out_w"], p["out_b"])
    updated = ad.add(xw, ad.reshape(update, (n, nw, 1, c)))
    return t_window_merge(updated, side, window)


def t_mlp(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    hidden = ad.gelu(ad.linear(x, p["fc1_w"], p["fc1_b"]))
    return ad.linear(hidden, p["fc2_w"], p["fc2_b"])


def t_g2l_block(x: Tensor, p: dict[str, Tensor], cfg: G2LConfig) -> Tensor:
    """Global stage, then pre-norm local attention and MLP residuals."""
    side = x.shape[1]
    y = t_global_stage(x, _sub(p, "glob_"), cfg.window, cfg.heads)
    h = ad.layer_norm(y, p["ln1_gamma"], p["ln1_beta"])
    h = t_window_partition(h, cfg.window)
    h = t_local_attention(h, _sub(p, "attn_"), cfg.heads, cfg.window)
    y = ad.add(y, t_window_merge(h, side, cfg.window))
    h = ad.layer_norm(y, p["ln2_gamma"], p["ln2_beta"])
    return ad.add(y, t_mlp(h, _sub(p, "mlp_")))


def _sub(p: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {k[len(prefix):]: v for k, v in p.items() if k.startswith(prefix)}


def block_param_shapes(cfg: G2LConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of every learnable tensor in one block, keyed by local name."""
    c = cfg.channels
    hidden = int(round(cfg.mlp_ratio * c))
    span = 2 * cfg.window - 1
    shapes: dict[str, tuple[int, ...]] = {}
    for stage in ("attn", "glob"):
        for name in ("q", "k", "v", "out"):
            shapes[f"{stage}_{name}_w"] = (c, c)
            shapes[f"{stage}_{name}_b"] = (c,)
    shapes["attn_rel_bias"] = (span**3, cfg.heads)
    for ln in ("ln1", "ln2"):
        shapes[f"{ln}_gamma"] = (c,)
        shapes[f"{ln}_beta"] = (c,)
    shapes["mlp_fc1_w"] = (c, hidden)
    shapes["mlp_fc1_b"] = (hidden,)
    shapes["mlp_fc2_w"] = (hidden, c)
    shapes["mlp_fc2_b"] = (c,)
    return shapes


# ---------------------------------------------------------------------------
# Ndarray-facing wrappers for single grids / window stacks.


def _as_grid_array(grid) -> np.ndarray:
    if isinstance(grid, FeatureGrid):
        return grid.data
    return np.asarray(grid)


def window_partition(grid, window: int) -> np.ndarray:
    """Split a cubic feature grid into its (side/window)^3 windows.

    Returns an array of shape (n_windows, window^3, channels); the
    partition is lossless and ``window_merge`` inverts it exactly.
    """
    arr = _as_grid_array(grid)
    if arr.ndim != 4 or not (arr.shape[0] == arr.shape[1] == arr.shape[2]):
        raise ShapeMismatch(f"expected a cubic (s, s, s, C) grid, got {arr.shape}")
    out = t_window_partition(Tensor(arr[None]), window)
    return out.data[0]


def window_merge(windows: np.ndarray, side: int | None = None) -> np.ndarray:
    """Reassemble windows produced by :func:`window_partition`."""
    arr = np.asarray(windows)
    if arr.ndim != 3:
        raise ShapeMismatch(f"expected (n_windows, tokens, C), got {arr.shape}")
    n_windows, tokens = arr.shape[0], arr.shape[1]
    window = round(tokens ** (1.0 / 3.0))
    blocks = round(n_windows ** (1.0 / 3.0))
    if window**3 != tokens or blocks**3 != n_windows:
        raise ShapeMismatch("window stack does not describe a cubic grid")
    inferred = blocks * window
    if side is not None and side != inferred:
        raise ShapeMismatch(f"side {side} inconsistent with windows (inferred {inferred})")
    out = t_window_merge(Tensor(arr[None]), inferred, window)
    return out.data[0]


def _tensor_params(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(np.asarray(v)) for k, v in params.items()}


def local_attention(windows: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    """Windowed multi-head attention on a (n_windows, tokens, C) stack.

    The head count is read off the relative-position bias table, whose
    trailing axis is per-head.
    """
    arr = np.asarray(windows)
    rel = np.asarray(params["rel_bias"])
    heads = rel.shape[-1]
    window = round(arr.shape[1] ** (1.0 / 3.0))
    if window**3 != arr.shape[1]:
        raise ShapeMismatch(f"token count {arr.shape[1]} is not a cube")
    if rel.shape[0] != (2 * window - 1) ** 3:
        raise ShapeMismatch("relative bias table does not match the window size")
    out = t_local_attention(Tensor(arr[None]), _tensor_params(params), heads, window)
    return out.data[0]


def global_stage(grid, params: dict[str, np.ndarray], window: int, heads: int) -> np.ndarray:
    """Pooled-window attention update, residually added to the grid."""
    arr = _as_grid_array(grid)
    if arr.shape[3] % heads != 0:
        raise ShapeMismatch(f"heads {heads} must divide channels {arr.shape[3]}")
    out = t_global_stage(Tensor(arr[None]), _tensor_params(params), window, heads)
    return out.data[0]


def g2l_block_forward(grid, params: dict[str, np.ndarray], cfg: G2LConfig) -> np.ndarray:
    """Run one full block on a single grid."""
    arr = _as_grid_array(grid)
    if arr.shape[3] != cfg.channels:
        raise ShapeMismatch(f"grid has {arr.shape[3]} channels, config says {cfg.channels}")
    out = t_g2l_block(Tensor(arr[None]), _tensor_params(params), cfg)
    return out.data[0]
