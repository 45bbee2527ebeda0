"""Video quality filtering, shot detection, query-frame choice and point sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

MIN_FPS = 29.9
MIN_PIXELS = 200_000
MIN_DYNAMIC_RANGE = 0.55

SHOT_WINDOW = 100
SHOT_QUERY_POINTS = 50
SHOT_VISIBILITY = 0.06

QUERY_PARTITION = 1000
QUERY_DECILE = 0.10


class PipelineError(ValueError):
    pass


@dataclass
class QualityReport:
    fps: float
    pixel_count: int
    dynamic_range: float
    accepted: bool


def to_grayscale(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames)
    if frames.ndim == 4 and frames.shape[-1] == 3:
        return frames.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    return frames.astype(np.float64)


def dynamic_range_ratio(frames: np.ndarray, dtype_range: tuple[float, float] | None = None) -> float:
    """Mean over frames of (P99 - P1) / (I_max - I_min)."""
    frames = np.asarray(frames)
    if frames.size == 0 or frames.shape[0] == 0:
        raise PipelineError("no frames to analyse")
    if dtype_range is None:
        if np.issubdtype(frames.dtype, np.integer):
            info = np.iinfo(frames.dtype)
            dtype_range = (float(info.min), float(info.max))
        else:
            dtype_range = (0.0, 1.0)
    lo, hi = dtype_range
    gray = to_grayscale(frames).reshape(frames.shape[0], -1)
    p1, p99 = np.percentile(gray, [1, 99], axis=1)
    return float(np.mean((p99 - p1) / (hi - lo)))


def dynamic_range_filter(frames: np.ndarray, dtype_range=None, fps: float = 30.0) -> QualityReport:
    frames = np.asarray(frames)
    r = dynamic_range_ratio(frames, dtype_range)
    pixels = int(frames.shape[1] * frames.shape[2])
    ok = fps >= MIN_FPS and pixels >= MIN_PIXELS and r >= MIN_DYNAMIC_RANGE
    return QualityReport(float(fps), pixels, r, bool(ok))


# --------------------------------------------------------------------------
# shots


def detect_shots(visibility_fn: Callable[[int, int], Sequence[int]], total_frames: int,
                 window: int = SHOT_WINDOW, n_query: int = SHOT_QUERY_POINTS,
                 threshold: float = SHOT_VISIBILITY) -> list[int]:
    """Greedy windowed shot-boundary search.

    ``visibility_fn(start, stop)`` returns, for each frame in ``[start, stop)``,
    how many of ``n_query`` points sampled at ``start`` are still visible.  The
    first frame below ``threshold`` visibility is a boundary and the next
    window restarts there; otherwise the window advances by ``window`` frames.
    Each probe also looks at the frame just past the window, so a cut that
    lands exactly on a window edge is still reported.
    """
    boundaries: list[int] = []
    start = 0
    while start < total_frames:
        stop = min(start + window + 1, total_frames)
        counts = np.asarray(visibility_fn(start, stop))
        if counts.shape != (stop - start,):
            raise PipelineError(f"visibility_fn returned {counts.shape}, expected ({stop - start},)")
        low = np.nonzero(counts[1:] / n_query < threshold)[0]
        if low.size:
            start = start + 1 + int(low[0])
            boundaries.append(start)
        else:
            start = min(start + window, total_frames)
    return boundaries


def shot_segments(boundaries: Sequence[int], total_frames: int) -> list[tuple[int, int]]:
    edges = [0, *boundaries, total_frames]
    return [(a, b) for a, b in zip(edges[:-1], edges[1:])]


# --------------------------------------------------------------------------
# query frame


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def mean_pairwise_iou(boxes) -> float:
    # a single box has no overlap partner
    if len(boxes) < 2:
        return 0.0
    vals = [box_iou(boxes[i], boxes[j]) for i in range(len(boxes)) for j in range(i + 1, len(boxes))]
    return float(np.mean(vals))


def select_query_frame(detections: Sequence[Sequence[tuple]]) -> int:
    """Pick a frame where the expected number of animals are visible and well separated.

    ``detections[f]`` is a list of ``(box, confidence)`` with ``box = (x0, y0, x1, y1)``.
    """
    counts = np.array([len(d) for d in detections])
    if counts.size == 0 or counts.max() == 0:
        raise PipelineError("no detections in any frame")
    n = int(math.floor(counts.mean() + 0.5))
    pool = np.nonzero(counts == n)[0]
    if pool.size == 0:
        # fall back to the frames whose count is nearest the estimate
        gap = np.abs(counts - n)
        gap[counts == 0] = np.iinfo(gap.dtype).max
        pool = np.nonzero(gap == gap.min())[0]
    ious = np.array([mean_pairwise_iou([box for box, _ in detections[f]]) for f in pool])
    keep = max(1, math.ceil(QUERY_DECILE * pool.size))
    # frames tied with the cutoff overlap stay in, so equal-IoU pools fall through to confidence
    cutoff = np.sort(ious)[keep - 1]
    cand = pool[ious <= cutoff]
    conf = np.array([np.mean([c for _, c in detections[f]]) for f in cand])
    return int(cand[int(np.argmax(conf))])


def select_query_frames(detections: Sequence[Sequence[tuple]], partition: int = QUERY_PARTITION) -> list[int]:
    """One query frame per ``partition``-frame chunk of a long shot (absolute indices)."""
    out = []
    for start in range(0, len(detections), partition):
        chunk = detections[start:start + partition]
        if any(len(d) for d in chunk):
            out.append(start + select_query_frame(chunk))
    return out


# --------------------------------------------------------------------------
# query point sampling


@dataclass
class SamplingWeights:
    coords: np.ndarray  # [M, 2] (row, col) of mask pixels
    probabilities: np.ndarray  # [M]
    epsilon_dt: float = 1e-6
    dt_fraction: float = 0.75
    uniform_fraction: float = 0.25


def inverse_distance_probabilities(distance: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    inv = 1.0 / (np.asarray(distance, dtype=np.float64) + eps)
    return inv / inv.sum()


def sampling_weights(mask: np.ndarray, eps: float = 1e-6) -> SamplingWeights:
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise PipelineError("empty mask")
    # pad so the image border counts as mask boundary
    dist = ndimage.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1]
    coords = np.argwhere(mask)
    probs = inverse_distance_probabilities(dist[mask], eps)
    return SamplingWeights(coords, probs, eps)


def split_counts(n: int, dt_fraction: float = 0.75) -> tuple[int, int]:
    n_dt = int(round(dt_fraction * n))
    return n_dt, n - n_dt


def sample_query_points(weights: SamplingWeights, n: int = 500,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw ``n`` mask pixels: 75% from the inverse-distance law, the rest uniform."""
    rng = rng or np.random.default_rng(0)
    n_dt, n_uni = split_counts(n, weights.dt_fraction)
    m = weights.coords.shape[0]
    idx = np.concatenate([rng.choice(m, n_dt, p=weights.probabilities), rng.integers(0, m, n_uni)])
    return weights.coords[idx]


def sample_video_query_points(masks: np.ndarray, n: int = 500,
                              rng: np.random.Generator | None = None) -> np.ndarray:
    """Sample ``(frame, row, col)`` queries: frame uniform in time, then pixel from that frame's mask."""
    rng = rng or np.random.default_rng(0)
    masks = np.asarray(masks).astype(bool)
    usable = np.nonzero(masks.reshape(masks.shape[0], -1).any(axis=1))[0]
    if usable.size == 0:
        raise PipelineError("all masks are empty")
    frames = rng.choice(usable, n)
    n_dt, _ = split_counts(n)
    uniform = np.zeros(n, dtype=bool)
    uniform[n_dt:] = True
    out = np.empty((n, 3), dtype=np.int64)
    cache: dict[int, SamplingWeights] = {}
    for k, (f, uni) in enumerate(zip(frames, uniform)):
        w = cache.get(int(f)) or cache.setdefault(int(f), sampling_weights(masks[f]))
        m = w.coords.shape[0]
        j = rng.integers(0, m) if uni else rng.choice(m, p=w.probabilities)
        out[k] = (f, *w.coords[j])
    return out


def select_background_tracks(tracks: np.ndarray, visibility: np.ndarray, masks: np.ndarray,
                             dilation_px: int = 32, max_inside: float = 0.5) -> np.ndarray:
    """Boolean mask of tracks usable for camera estimation.

    A track is foreground when more than ``max_inside`` of its visible frames
    fall inside the animal mask dilated by ``dilation_px``.
    """
    masks = np.asarray(masks).astype(bool)
    t, h, w = masks.shape
    dilated = np.stack([ndimage.distance_transform_edt(~m) <= dilation_px for m in masks])
    xy = np.round(np.asarray(tracks)).astype(int)
    col = np.clip(xy[..., 0], 0, w - 1)
    row = np.clip(xy[..., 1], 0, h - 1)
    inside = dilated[np.arange(t)[None, :], row, col]
    vis = np.asarray(visibility).astype(bool)
    n_vis = vis.sum(axis=1)
    frac = np.where(n_vis > 0, (inside & vis).sum(axis=1) / np.maximum(n_vis, 1), 1.0)
    return (frac <= max_inside) & (n_vis > 0)
