"""Camera stabilization from background point tracks.

Homographies follow the convention ``p_t ~ H_t p_ref``: ``H_t`` maps the
reference (middle) frame into frame ``t``.  A point seen at frame ``t'`` is
carried into frame ``t`` by ``H_t H_{t'}^{-1}``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INLIER_THRESHOLD_PX = 2.0
RANSAC_ITERS = 500
REFINE_PASSES = 2
MIN_INLIER_RATIO = 0.5
MAX_CONDITION = 1e8


@dataclass
class HomographySeq:
    matrices: np.ndarray  # [T, 3, 3]
    reference_index: int
    inlier_ratios: np.ndarray  # [T]
    valid: bool
    reason: str = ""


def _hartley(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Similarity normalizing points to zero mean and mean distance sqrt(2); works batched."""
    c = pts.mean(axis=-2, keepdims=True)
    d = np.linalg.norm(pts - c, axis=-1).mean(axis=-1)
    s = np.sqrt(2.0) / np.maximum(d, 1e-12)
    t = np.zeros(pts.shape[:-2] + (3, 3))
    t[..., 0, 0] = s
    t[..., 1, 1] = s
    t[..., 0, 2] = -s * c[..., 0, 0]
    t[..., 1, 2] = -s * c[..., 0, 1]
    t[..., 2, 2] = 1.0
    normed = (pts - c) * s[..., None, None]
    return normed, t


def dlt_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalized DLT for ``dst ~ H src``; ``src``/``dst`` are ``[..., M, 2]`` with M >= 4."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    ns, ts = _hartley(src)
    nd, td = _hartley(dst)
    x, y = ns[..., 0], ns[..., 1]
    u, v = nd[..., 0], nd[..., 1]
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    r1 = np.stack([-x, -y, -one, zero, zero, zero, u * x, u * y, u], -1)
    r2 = np.stack([zero, zero, zero, -x, -y, -one, v * x, v * y, v], -1)
    a = np.concatenate([r1, r2], axis=-2)
    _, _, vt = np.linalg.svd(a)
    hn = vt[..., -1, :].reshape(a.shape[:-2] + (3, 3))
    h = np.linalg.solve(td, hn @ ts)
    scale = h[..., 2:3, 2:3]
    scale = np.where(np.abs(scale) > 1e-12, scale, 1.0)
    return h / scale


def project(h: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply ``h`` to ``[..., M, 2]`` points; also returns the homogeneous w."""
    hom = pts @ h[..., :2].swapaxes(-1, -2) + h[..., None, :, 2]
    w = hom[..., 2]
    safe = np.where(np.abs(w) > 1e-12, w, 1e-12)
    return hom[..., :2] / safe[..., None], w


def ransac_homography(src: np.ndarray, dst: np.ndarray, rng: np.random.Generator,
                      threshold: float = INLIER_THRESHOLD_PX, iters: int = RANSAC_ITERS,
                      refine_passes: int = REFINE_PASSES) -> tuple[np.ndarray, np.ndarray]:
    m = src.shape[0]
    samples = np.argsort(rng.random((iters, m)), axis=1)[:, :4]
    with np.errstate(all="ignore"):
        hs = dlt_homography(src[samples], dst[samples])
        proj, _ = project(hs, np.broadcast_to(src, (iters, m, 2)))
        err = np.linalg.norm(proj - dst[None], axis=-1)
    err = np.where(np.isfinite(err), err, np.inf)
    counts = (err < threshold).sum(axis=1)
    best = int(np.argmax(counts))
    h = hs[best]
    inliers = err[best] < threshold
    for _ in range(refine_passes):
        if inliers.sum() < 4:
            break
        h = dlt_homography(src[inliers], dst[inliers])
        proj, _ = project(h, src)
        inliers = np.linalg.norm(proj - dst, axis=-1) < threshold
    return h, inliers


def estimate_stabilization(background_tracks: np.ndarray, visibility: np.ndarray, seed: int = 0,
                           threshold: float = INLIER_THRESHOLD_PX, iters: int = RANSAC_ITERS,
                           refine_passes: int = REFINE_PASSES) -> HomographySeq:
    """Per-frame homographies to the middle frame from background tracks.

    Never raises on bad data: insufficient support marks the sequence invalid.
    """
    bg = np.asarray(background_tracks, dtype=np.float64)
    vis = np.asarray(visibility).astype(bool)
    b, t = vis.shape
    ref = t // 2
    mats = np.tile(np.eye(3), (t, 1, 1))
    ratios = np.zeros(t)
    if b < 8:
        return HomographySeq(mats, ref, ratios, False, f"only {b} background tracks")
    rng = np.random.default_rng(seed)
    reasons = []
    for k in range(t):
        co = vis[:, ref] & vis[:, k]
        if co.sum() < 4:
            reasons.append(f"frame {k}: {int(co.sum())} co-visible points")
            continue
        if k == ref:
            ratios[k] = 1.0
            continue
        h, inl = ransac_homography(bg[co, ref], bg[co, k], rng, threshold, iters, refine_passes)
        mats[k] = h
        ratios[k] = inl.mean()
    conds = np.array([np.linalg.cond(m) for m in mats])
    if not np.all(np.isfinite(conds)) or conds.max() >= MAX_CONDITION:
        reasons.append(f"ill-conditioned homography (cond {np.nanmax(conds):.3g})")
    if ratios.mean() <= MIN_INLIER_RATIO:
        reasons.append(f"mean inlier ratio {ratios.mean():.3f}")
    return HomographySeq(mats, ref, ratios, not reasons, "; ".join(reasons))


def stabilize_tracks(pixel_tracks: np.ndarray, homographies: HomographySeq | np.ndarray,
                     anchor_frame: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Carry every point into the anchor frame's pixel coordinates.

    Returns the stabilized tracks and a validity mask that is False where the
    homogeneous coordinate vanished.
    """
    hs = homographies.matrices if isinstance(homographies, HomographySeq) else np.asarray(homographies)
    pts = np.asarray(pixel_tracks, dtype=np.float64)
    t = pts.shape[1]
    out = np.empty_like(pts)
    ok = np.ones(pts.shape[:2], dtype=bool)
    anchor = hs[anchor_frame]
    for k in range(t):
        if k == anchor_frame:
            out[:, k] = pts[:, k]
            continue
        m = anchor @ np.linalg.inv(hs[k])
        proj, w = project(m, pts[:, k])
        out[:, k] = proj
        ok[:, k] = np.abs(w) > 1e-9
    return out, ok


def reprojection_error(homographies: HomographySeq | np.ndarray, ref_points: np.ndarray,
                       frame_points: np.ndarray, anchor_frame: int = 0) -> float:
    """Mean distance between ``H_t H_anchor^{-1} ref_points`` and the true frame-t points."""
    hs = homographies.matrices if isinstance(homographies, HomographySeq) else np.asarray(homographies)
    t = frame_points.shape[1]
    inv_anchor = np.linalg.inv(hs[anchor_frame])
    errs = []
    for k in range(t):
        proj, _ = project(hs[k] @ inv_anchor, ref_points)
        errs.append(np.linalg.norm(proj - frame_points[:, k], axis=-1))
    return float(np.mean(errs))
