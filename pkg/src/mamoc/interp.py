"""Trilinear sampling shared by grid resampling and the motion simulator."""

from __future__ import annotations

import numpy as np


def trilinear_sample(data: np.ndarray, x, y, z, *, wrap: bool = False) -> np.ndarray:
    """Sample ``data`` at fractional voxel coordinates.

    ``data`` is indexed ``[x, y, z]``. Coordinates may be any mutually
    broadcastable float arrays; the result has their broadcast shape and
    dtype float64. Out-of-range coordinates are clamped to the grid
    boundary unless ``wrap`` is set, in which case the grid is treated
    as periodic along every axis.
    """
    nx, ny, nz = data.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)

    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    z0 = np.floor(z).astype(np.int64)
    fx = x - x0
    fy = y - y0
    fz = z - z0

    if wrap:
        ix0, ix1 = x0 % nx, (x0 + 1) % nx
        iy0, iy1 = y0 % ny, (y0 + 1) % ny
        iz0, iz1 = z0 % nz, (z0 + 1) % nz
    else:
        ix0 = np.clip(x0, 0, nx - 1)
        ix1 = np.clip(x0 + 1, 0, nx - 1)
        iy0 = np.clip(y0, 0, ny - 1)
        iy1 = np.clip(y0 + 1, 0, ny - 1)
        iz0 = np.clip(z0, 0, nz - 1)
        iz1 = np.clip(z0 + 1, 0, nz - 1)

    d = data.astype(np.float64, copy=False)
    c000 = d[ix0, iy0, iz0]
    c100 = d[ix1, iy0, iz0]
    c010 = d[ix0, iy1, iz0]
    c110 = d[ix1, iy1, iz0]
    c001 = d[ix0, iy0, iz1]
    c101 = d[ix1, iy0, iz1]
    c011 = d[ix0, iy1, iz1]
    c111 = d[ix1, iy1, iz1]

    c00 = c000 + (c100 - c000) * fx
    c10 = c010 + (c110 - c010) * fx
    c01 = c001 + (c101 - c001) * fx
    c11 = c011 + (c111 - c011) * fx
    c0 = c00 + (c10 - c00) * fy
    c1 = c01 + (c11 - c01) * fy
    return c0 + (c1 - c0) * fz
