"""Evaluation measures: PSNR, SSIM, SNR, CNR, per-class Dice overlap, and
the Dice improvement delta between corrected and affected segmentations.

PSNR and Dice are exact arithmetic on float64; SSIM uses Gaussian local
moments with window renormalization at the borders, so truncated windows
near the faces still weight to one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import (
    BackgroundDegenerate,
    DegenerateContrast,
    DimMismatch,
    EmptyMask,
    InvalidArgument,
    VolumeTooSmall,
)
from .volume_io import LabelVolume, Volume


@dataclass(frozen=True)
class SsimConfig:
    window_side: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    peak: float = 1.0

    def __post_init__(self):
        if self.window_side % 2 != 1 or self.window_side < 1:
            raise InvalidArgument(f"window side must be odd, got {self.window_side}")
        if min(self.sigma, self.k1, self.k2, self.peak) <= 0:
            raise InvalidArgument("sigma, k1, k2 and peak must be positive")


def _as_array(vol) -> np.ndarray:
    if isinstance(vol, Volume):
        return vol.data
    return np.asarray(vol)


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimMismatch(f"{a.shape} vs {b.shape}")


def psnr(a, b, peak: float) -> float:
    """Peak signal-to-noise ratio in decibels; infinity when identical."""
    x = _as_array(a).astype(np.float64)
    y = _as_array(b).astype(np.float64)
    _check_dims(x, y)
    if peak <= 0:
        raise InvalidArgument(f"peak must be positive, got {peak}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_kernel(side: int, sigma: float) -> np.ndarray:
    radius = side // 2
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    return kernel / kernel.sum()


def _local_weighted(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = arr
    for axis in range(3):
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="constant", cval=0.0)
    return out


def ssim(a, b, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean structural similarity over all voxel neighborhoods."""
    x = _as_array(a).astype(np.float64)
    y = _as_array(b).astype(np.float64)
    _check_dims(x, y)
    if min(x.shape) < cfg.window_side:
        raise VolumeTooSmall(f"dims {x.shape} smaller than window {cfg.window_side}")

    kernel = _gaussian_kernel(cfg.window_side, cfg.sigma)
    # truncated border windows renormalize to unit weight
    weight = _local_weighted(np.ones_like(x), kernel)

    mu_x = _local_weighted(x, kernel) / weight
    mu_y = _local_weighted(y, kernel) / weight
    e_xx = _local_weighted(x * x, kernel) / weight
    e_yy = _local_weighted(y * y, kernel) / weight
    e_xy = _local_weighted(x * y, kernel) / weight
    var_x = e_xx - mu_x * mu_x
    var_y = e_yy - mu_y * mu_y
    cov = e_xy - mu_x * mu_y

    c1 = (cfg.k1 * cfg.peak) ** 2
    c2 = (cfg.k2 * cfg.peak) ** 2
    score = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )
    return float(score.mean())


def _region_values(vol, mask) -> np.ndarray:
    arr = _as_array(vol).astype(np.float64)
    sel = np.asarray(mask, dtype=bool)
    _check_dims(arr, sel)
    if not sel.any():
        raise EmptyMask("region mask selects no voxels")
    return arr[sel]


def snr(vol, fg_mask, bg_mask) -> float:
    """Foreground mean over background standard deviation (population)."""
    fg = _region_values(vol, fg_mask)
    bg = _region_values(vol, bg_mask)
    if np.logical_and(np.asarray(fg_mask, bool), np.asarray(bg_mask, bool)).any():
        raise InvalidArgument("foreground and background masks overlap")
    spread = float(bg.std())
    if spread == 0.0:
        raise BackgroundDegenerate("background region has zero intensity spread")
    return float(fg.mean()) / spread


def cnr(vol, gm_mask, wm_mask) -> float:
    """Mean separation of two tissue regions over their pooled spread.

    ``|mean_a - mean_b| / sqrt(var_a + var_b)`` with population variances.
    Two constant regions with equal means score zero by convention; two
    constant regions with different means have no finite contrast.
    """
    a = _region_values(vol, gm_mask)
    b = _region_values(vol, wm_mask)
    if np.logical_and(np.asarray(gm_mask, bool), np.asarray(wm_mask, bool)).any():
        raise InvalidArgument("tissue masks overlap")
    gap = abs(float(a.mean()) - float(b.mean()))
    pooled = float(a.var()) + float(b.var())
    if pooled == 0.0:
        if gap == 0.0:
            return 0.0
        raise DegenerateContrast("constant regions with different means")
    return gap / math.sqrt(pooled)


@dataclass(frozen=True)
class DiceScores:
    per_class: dict[int, float]
    mean: float


def _as_labels(vol) -> np.ndarray:
    if isinstance(vol, LabelVolume):
        return vol.labels
    return np.asarray(vol)


def dice(a, b, classes=None, *, include_background: bool = False) -> DiceScores:
    """Per-class overlap ``2|A & B| / (|A| + |B|)`` plus its mean.

    Classes absent from both volumes are excluded from the mean; the
    background id 0 is excluded unless requested.
    """
    x = _as_labels(a)
    y = _as_labels(b)
    _check_dims(x, y)
    if classes is None:
        classes = np.union1d(np.unique(x), np.unique(y)).tolist()
    per_class: dict[int, float] = {}
    for cls in classes:
        cls = int(cls)
        if cls == 0 and not include_background:
            continue
        in_x = x == cls
        in_y = y == cls
        total = int(in_x.sum()) + int(in_y.sum())
        if total == 0:
            continue
        per_class[cls] = 2.0 * int(np.logical_and(in_x, in_y).sum()) / total
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return DiceScores(per_class=per_class, mean=mean)


def dice_improvement(seg_mf, seg_ma, seg_mc, classes=None) -> float:
    """Class-averaged Dice gain of the corrected over the affected
    segmentation, both against the motion-free one."""
    corrected = dice(seg_mf, seg_mc, classes)
    affected = dice(seg_mf, seg_ma, classes)
    return corrected.mean - affected.mean
