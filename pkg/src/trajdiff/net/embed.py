"""Feature lookup and sinusoidal embeddings."""
from __future__ import annotations

import numpy as np

MAX_FREQUENCY = 10000.0


def frequency_ladder(n: int) -> np.ndarray:
    """``n`` frequencies spaced geometrically from 1 to 10000."""
    if n == 1:
        return np.ones(1)
    return MAX_FREQUENCY ** (np.arange(n) / (n - 1))


def sinusoidal_embed(value, dim: int) -> np.ndarray:
    """Interleaved ``[sin(w_0 v), cos(w_0 v), sin(w_1 v), ...]``; works elementwise on arrays."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    v = np.asarray(value, dtype=np.float64)[..., None]
    args = v * frequency_ladder(dim // 2)
    out = np.empty(v.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(args)
    out[..., 1::2] = np.cos(args)
    return out


def position_encoding(start_points, dim: int) -> np.ndarray:
    """Encoding of a track's initial (x, y): half the channels per coordinate."""
    if dim % 4:
        raise ValueError("position encoding dim must be divisible by 4")
    pts = np.asarray(start_points, dtype=np.float64)
    return np.concatenate([sinusoidal_embed(pts[..., 0], dim // 2), sinusoidal_embed(pts[..., 1], dim // 2)], -1)


def bilinear_feature(feature_grid: np.ndarray, point) -> np.ndarray:
    """Sample an ``[H, W, C]`` grid at normalized ``(x, y)``; grid nodes sit at i / (W - 1).

    Queries outside the unit square are clamped to the border.
    """
    grid = np.asarray(feature_grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("empty feature grid")
    h, w = grid.shape[:2]
    pts = np.asarray(point, dtype=np.float64)
    x = np.clip(pts[..., 0], 0.0, 1.0) * (w - 1)
    y = np.clip(pts[..., 1], 0.0, 1.0) * (h - 1)
    x0 = np.clip(np.floor(x).astype(int), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(int), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    top = grid[y0, x0] * (1 - fx) + grid[y0, x1] * fx
    bottom = grid[y1, x0] * (1 - fx) + grid[y1, x1] * fx
    return top * (1 - fy) + bottom * fy
