"""Non-learned forecasting baselines.  All of them mark every future point visible."""
from __future__ import annotations

import numpy as np

from ..trackcore import TrackSet, displacement_conditioning, fill_occluded


def _history(tracks: TrackSet) -> np.ndarray:
    tc = tracks.t_cond
    return fill_occluded(tracks.positions[:, :tc], tracks.visibility[:, :tc])


def _assemble(tracks: TrackSet, hist: np.ndarray, future: np.ndarray) -> TrackSet:
    tc = tracks.t_cond
    pos = np.concatenate([hist, future], axis=1)
    vis = np.ones(pos.shape[:2], dtype=np.uint8)
    vis[:, :tc] = tracks.visibility[:, :tc]
    return TrackSet(pos, vis, tc, tracks.n_valid, tracks.fps)


def _future_steps(tracks: TrackSet, horizon: int | None) -> np.ndarray:
    horizon = horizon or tracks.horizon
    tc = tracks.t_cond
    return np.arange(tc, horizon) - (tc - 1)


def baseline_no_motion(tracks: TrackSet, horizon: int | None = None) -> TrackSet:
    """Hold each point at its last conditioning position."""
    hist = _history(tracks)
    k = _future_steps(tracks, horizon)
    future = np.repeat(hist[:, -1:], k.size, axis=1)
    return _assemble(tracks, hist, future)


def baseline_constant_velocity(tracks: TrackSet, horizon: int | None = None) -> TrackSet:
    """Extrapolate each point with its average conditioning velocity."""
    hist = _history(tracks)
    tc = tracks.t_cond
    vel = (hist[:, -1] - hist[:, 0]) / max(tc - 1, 1)
    k = _future_steps(tracks, horizon)
    future = hist[:, -1:, :] + k[None, :, None] * vel[:, None, :]
    return _assemble(tracks, hist, future)


def baseline_oracle_velocity(tracks: TrackSet, gt: TrackSet | None = None, horizon: int | None = None) -> TrackSet:
    """Move every point with the ground-truth mean per-frame velocity of the whole animal."""
    gt = gt or tracks
    hist = _history(tracks)
    d = displacement_conditioning(gt)
    vel = np.zeros(2) if d is None else d / (gt.horizon - 1)
    k = _future_steps(tracks, horizon)
    future = hist[:, -1:, :] + k[None, :, None] * vel[None, None, :]
    return _assemble(tracks, hist, future)


BASELINES = {
    "no-motion": baseline_no_motion,
    "const-vel": baseline_constant_velocity,
    "oracle-vel": baseline_oracle_velocity,
}
