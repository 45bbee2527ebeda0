"""Example-level and distribution-level forecasting metrics.

Positions are in bbox-normalized units; pixel-threshold metrics rescale by a
256-pixel frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PIXEL_SCALE = 256.0
PWT_THRESHOLDS = (1.0, 2.0, 4.0, 8.0, 16.0)
FVMD_GRID = (16, 16, 8)
FVMD_ANGLE_BINS = 8


def _future(arr, t_cond: int):
    return np.asarray(arr)[:, t_cond:]


def ade_fde(pred, gt, visibility, t_cond: int = 4, squared: bool = False) -> tuple[float, float]:
    """Mean distance over GT-visible predicted points, and at the final frame only.

    ``squared`` switches to mean squared distance.  Returns NaN where no point is visible.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    vis = _future(visibility, t_cond).astype(bool)
    err = np.linalg.norm(_future(pred, t_cond) - _future(gt, t_cond), axis=-1)
    if squared:
        err = err ** 2
    ade = float(err[vis].mean()) if vis.any() else math.nan
    fde = float(err[vis[:, -1], -1].mean()) if vis[:, -1].any() else math.nan
    return ade, fde


def pwt(pred, gt, visibility, t_cond: int = 4, thresholds=PWT_THRESHOLDS,
        pixel_scale: float = PIXEL_SCALE) -> float:
    """Percentage of GT-visible predicted points within each pixel threshold, averaged over thresholds."""
    vis = _future(visibility, t_cond).astype(bool)
    if not vis.any():
        return math.nan
    err = np.linalg.norm(_future(pred, t_cond) - _future(gt, t_cond), axis=-1)[vis] * pixel_scale
    return float(100.0 * np.mean([(err < d).mean() for d in thresholds]))


# --------------------------------------------------------------------------
# Frechet distance between Gaussian fits


@dataclass
class FrechetResult:
    value: float
    regularized: bool
    method: str  # "dense" or "gram"


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(mat)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    # tr sqrt(A^1/2 B A^1/2) is the nuclear norm of A^1/2 B^1/2; the SVD keeps small
    # eigenvalues accurate where a square root of the product would amplify roundoff
    tr_sqrt = float(np.linalg.svd(_sqrtm_psd(cov_a) @ _sqrtm_psd(cov_b), compute_uv=False).sum())
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)


def frechet_stats(set_a, set_b, eps: float = 1e-6, max_dense_dim: int = 2048) -> FrechetResult:
    """Frechet distance between Gaussians fitted to the rows of two sample matrices.

    Low-dimensional inputs use dense covariances (with ``eps * I`` added when
    either set has fewer than dim + 1 samples).  High-dimensional inputs use
    the exact low-rank identity tr sqrt(Ca Cb) = nuclear norm of Xa Xb^T,
    scaled by the sample counts, which needs no regularization.
    """
    a = np.atleast_2d(np.asarray(set_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(set_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets have different dimensions")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least 2 samples per set")
    dim = a.shape[1]
    mu_a, mu_b = a.mean(0), b.mean(0)
    xa, xb = a - mu_a, b - mu_b
    na, nb = a.shape[0] - 1, b.shape[0] - 1
    if dim <= max_dense_dim:
        cov_a = xa.T @ xa / na
        cov_b = xb.T @ xb / nb
        reg = min(a.shape[0], b.shape[0]) < dim + 1
        if reg:
            cov_a = cov_a + eps * np.eye(dim)
            cov_b = cov_b + eps * np.eye(dim)
        return FrechetResult(frechet_from_moments(mu_a, cov_a, mu_b, cov_b), reg, "dense")
    tr_a = float(np.sum(xa * xa)) / na
    tr_b = float(np.sum(xb * xb)) / nb
    cross = np.linalg.svd(xa @ xb.T, compute_uv=False).sum() / math.sqrt(na * nb)
    return FrechetResult(float(np.sum((mu_a - mu_b) ** 2) + tr_a + tr_b - 2.0 * cross), False, "gram")


def frechet_gaussian(set_a, set_b, **kw) -> float:
    return frechet_stats(set_a, set_b, **kw).value


def fully_visible_tracks(visibility, t_cond: int = 4) -> np.ndarray:
    return _future(visibility, t_cond).astype(bool).all(axis=1)


def motion_vectors(positions, t_cond: int = 4, order: int = 1, pixel_scale: float = PIXEL_SCALE) -> np.ndarray:
    """Per-track flattened velocity (order 1) or acceleration (order 2) vectors over the forecast."""
    fut = _future(positions, t_cond) * pixel_scale
    diff = np.diff(fut, n=order, axis=1)
    return diff.reshape(diff.shape[0], -1)


# --------------------------------------------------------------------------
# motion histograms


def magnitude_weight(m) -> np.ndarray:
    """Log-scaled contribution ceil(log2(min(m, 255) + 1)); exactly 0 for zero motion."""
    m = np.asarray(m, dtype=np.float64)
    return np.ceil(np.log2(np.minimum(m, 255.0) + 1.0))


def orientation_bin(vectors, n_bins: int = FVMD_ANGLE_BINS) -> np.ndarray:
    """Sector index with sector 0 centred on +x, sectors advancing counter-clockwise."""
    v = np.asarray(vectors, dtype=np.float64)
    ang = np.arctan2(v[..., 1], v[..., 0])
    width = 2 * np.pi / n_bins
    return np.floor((ang + width / 2) / width).astype(int) % n_bins


def _histogram(vectors, anchors, valid, frame_index, n_frames, grid, n_bins):
    gx, gy, gt = grid
    hist = np.zeros((gt, gy, gx, n_bins))
    m = np.linalg.norm(vectors, axis=-1)
    w = magnitude_weight(m)
    use = valid & (w > 0)
    if not use.any():
        return hist.ravel()
    pos = anchors[use]
    cx = np.clip(np.floor(pos[:, 0] * gx).astype(int), 0, gx - 1)
    cy = np.clip(np.floor(pos[:, 1] * gy).astype(int), 0, gy - 1)
    ct = np.clip(frame_index[use] * gt // max(n_frames, 1), 0, gt - 1)
    ob = orientation_bin(vectors[use], n_bins)
    np.add.at(hist, (ct, cy, cx, ob), w[use])
    return hist.ravel()


def fvmd_features(positions, visibility, t_cond: int = 4, grid=FVMD_GRID, n_bins: int = FVMD_ANGLE_BINS,
                  pixel_scale: float = PIXEL_SCALE) -> np.ndarray:
    """Velocity and acceleration orientation histograms over the forecast, concatenated.

    Vectors are measured in pixels of a 256-pixel frame, placed in the
    spatial cell of the point where they start and the temporal cell of that
    frame, and weighted by their log magnitude.
    """
    pos = _future(positions, t_cond).astype(np.float64)
    vis = _future(visibility, t_cond).astype(bool)
    n, t, _ = pos.shape
    vel = np.diff(pos, axis=1) * pixel_scale
    vel_ok = vis[:, 1:] & vis[:, :-1]
    acc = np.diff(vel, axis=1)
    acc_ok = vel_ok[:, 1:] & vel_ok[:, :-1]
    tv = np.broadcast_to(np.arange(t - 1), (n, t - 1))
    ta = np.broadcast_to(np.arange(t - 2), (n, t - 2))
    hv = _histogram(vel, pos[:, :-1], vel_ok, tv, t - 1, grid, n_bins)
    ha = _histogram(acc, pos[:, :-2], acc_ok, ta, t - 2, grid, n_bins)
    return np.concatenate([hv, ha])


def fvmd(features_a, features_b) -> float:
    """Frechet distance between per-example motion histogram distributions."""
    return frechet_gaussian(features_a, features_b)


def vmd(pred, gt, visibility, t_cond: int = 4, pred_visibility=None) -> float:
    """Euclidean distance between one example's predicted and true motion histograms."""
    pv = visibility if pred_visibility is None else pred_visibility
    return float(np.linalg.norm(fvmd_features(pred, pv, t_cond) - fvmd_features(gt, visibility, t_cond)))


# --------------------------------------------------------------------------
# variance statistics


def trajectory_variance(samples, t_cond: int | None = None) -> float:
    """Variance of all coordinates after subtracting each track's first position.

    ``samples`` is ``[..., N, T, 2]``; with ``t_cond`` only the forecast frames are used.
    """
    p = np.asarray(samples, dtype=np.float64)
    rel = p - p[..., :1, :]
    if t_cond is not None:
        rel = rel[..., t_cond:, :]
    return float(rel.var())


def position_variance(samples) -> float:
    """Variance of raw flattened coordinates (no start subtraction)."""
    return float(np.asarray(samples, dtype=np.float64).var())


def difference_variance(samples, order: int, t_cond: int = 4, pixel_scale: float = PIXEL_SCALE) -> float:
    """Variance of flattened first (velocity) or second (acceleration) differences over the forecast."""
    p = np.asarray(samples, dtype=np.float64)[..., t_cond:, :] * pixel_scale
    return float(np.diff(p, n=order, axis=-2).var())
