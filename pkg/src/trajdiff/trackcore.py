"""Track data model and the velocity/occlusion reparameterization.

Tracks are stored point-major: ``positions[n, t] = (x, y)`` in coordinates
normalized to the (margin-expanded) first bounding box, ``visibility[n, t]``
is 1 for visible and 0 for occluded.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

SCALE_V = 12.0
SCALE_O = 0.1
MIN_VALID_TRACKS = 32
BUNDLE_VERSION = 1


class TrackError(ValueError):
    """Raised for inputs that violate the track data contracts."""


@dataclass
class TrackSet:
    positions: np.ndarray  # [N, T, 2]
    visibility: np.ndarray  # [N, T] uint8 in {0, 1}
    t_cond: int
    n_valid: int | None = None
    fps: float = 15.0

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64)
        vis = np.asarray(self.visibility)
        if self.positions.ndim != 3 or self.positions.shape[2] != 2:
            raise TrackError(f"positions must be [N, T, 2], got {self.positions.shape}")
        if vis.shape != self.positions.shape[:2]:
            raise TrackError(f"visibility shape {vis.shape} != {self.positions.shape[:2]}")
        if not np.all((vis == 0) | (vis == 1)):
            raise TrackError("visibility entries must be exactly 0 or 1")
        self.visibility = vis.astype(np.uint8)
        n, t = vis.shape
        if self.n_valid is None:
            self.n_valid = n
        if not 1 <= self.n_valid <= n:
            raise TrackError(f"n_valid={self.n_valid} outside [1, {n}]")
        if not 0 < self.t_cond < t:
            raise TrackError(f"t_cond={self.t_cond} must satisfy 0 < t_cond < T={t}")
        if not np.all(np.isfinite(self.positions[self.visibility == 1])):
            raise TrackError("visible positions must be finite")

    @property
    def n_tracks(self) -> int:
        return self.positions.shape[0]

    @property
    def horizon(self) -> int:
        return self.positions.shape[1]

    @property
    def valid_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_tracks, dtype=bool)
        mask[: self.n_valid] = True
        return mask

    def valid(self) -> "TrackSet":
        """Drop padded tracks."""
        k = self.n_valid
        return TrackSet(self.positions[:k], self.visibility[:k], self.t_cond, k, self.fps)

    def padded(self, n: int) -> "TrackSet":
        """Pad (with zero-visibility copies of track 0) up to ``n`` tracks."""
        k = self.n_valid
        if n < k:
            raise TrackError(f"cannot pad {k} valid tracks into {n} slots")
        pos = np.zeros((n, self.horizon, 2))
        vis = np.zeros((n, self.horizon), dtype=np.uint8)
        pos[:k] = self.positions[:k]
        vis[:k] = self.visibility[:k]
        pos[k:] = self.positions[0]
        return TrackSet(pos, vis, self.t_cond, k, self.fps)

    def subset(self, index: np.ndarray) -> "TrackSet":
        idx = np.asarray(index)
        return TrackSet(self.positions[idx], self.visibility[idx], self.t_cond, len(idx), self.fps)

    def window(self, start: int, length: int) -> "TrackSet":
        sl = slice(start, start + length)
        return TrackSet(self.positions[:, sl], self.visibility[:, sl], self.t_cond, self.n_valid, self.fps)


@dataclass
class DiffusionTarget:
    scaled_velocities: np.ndarray  # [N, T-1, 2]
    scaled_occlusion: np.ndarray  # [N, T]
    scale_v: float = SCALE_V
    scale_o: float = SCALE_O

    @property
    def horizon(self) -> int:
        return self.scaled_occlusion.shape[1]

    def flat(self) -> np.ndarray:
        """Per-track flat layout ``[v_1x, v_1y, ..., v_{T-1}y, o_1, ..., o_T]``."""
        n = self.scaled_velocities.shape[0]
        return np.concatenate([self.scaled_velocities.reshape(n, -1), self.scaled_occlusion], axis=1)

    @classmethod
    def from_flat(cls, flat: np.ndarray, horizon: int, scale_v: float = SCALE_V,
                  scale_o: float = SCALE_O) -> "DiffusionTarget":
        flat = np.asarray(flat)
        nv = 2 * (horizon - 1)
        if flat.shape[-1] != nv + horizon:
            raise TrackError(f"flat width {flat.shape[-1]} != {nv + horizon} for T={horizon}")
        vel = flat[..., :nv].reshape(*flat.shape[:-1], horizon - 1, 2)
        return cls(vel, flat[..., nv:], scale_v, scale_o)


def target_dim(horizon: int) -> int:
    return 2 * (horizon - 1) + horizon


@dataclass
class Conditioning:
    history_velocities: np.ndarray  # [N, T_c-1, 2], unscaled
    history_visibility: np.ndarray  # [N, T_c]
    start_points: np.ndarray  # [N, 2]
    displacement: np.ndarray | None = None
    history_present: bool = True

    def __post_init__(self) -> None:
        if self.displacement is not None:
            self.displacement = np.asarray(self.displacement, dtype=np.float64).reshape(2)
            if not np.all(np.isfinite(self.displacement)):
                raise TrackError("displacement conditioning must be finite")

    @property
    def t_cond(self) -> int:
        return self.history_visibility.shape[1]


# --------------------------------------------------------------------------
# coordinate normalization


def expand_bbox(bbox, margin_fraction: float = 0.5) -> np.ndarray:
    x0, y0, x1, y1 = (float(v) for v in bbox)
    if not (x1 > x0 and y1 > y0):
        raise TrackError(f"degenerate bbox {bbox}")
    if margin_fraction < 0:
        raise TrackError("margin_fraction must be >= 0")
    mx = margin_fraction * (x1 - x0)
    my = margin_fraction * (y1 - y0)
    return np.array([x0 - mx, y0 - my, x1 + mx, y1 + my])


def normalize_to_bbox(raw_points, bbox, margin_fraction: float = 0.5) -> np.ndarray:
    """Map pixel coordinates so the expanded box becomes the unit square.

    Points outside the box are kept (they land outside [0, 1]).
    """
    box = expand_bbox(bbox, margin_fraction)
    pts = np.asarray(raw_points, dtype=np.float64)
    return (pts - box[:2]) / (box[2:] - box[:2])


def denormalize_from_bbox(points, bbox, margin_fraction: float = 0.5) -> np.ndarray:
    box = expand_bbox(bbox, margin_fraction)
    return np.asarray(points, dtype=np.float64) * (box[2:] - box[:2]) + box[:2]


# --------------------------------------------------------------------------
# velocity reparameterization


def _visible_neighbours(visibility: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the last visible frame <= t and the first visible frame >= t."""
    vis = np.asarray(visibility).astype(bool)
    t = vis.shape[-1]
    idx = np.arange(t)
    prev = np.maximum.accumulate(np.where(vis, idx, -1), axis=-1)
    nxt = np.flip(np.minimum.accumulate(np.flip(np.where(vis, idx, t), axis=-1), axis=-1), axis=-1)
    return prev, nxt


def velocities_from_positions(positions, visibility) -> np.ndarray:
    """Per-step velocities with occlusion gaps filled by the average gap velocity.

    A step inside a gap between visible frames j < i gets (x_i - x_j) / (i - j).
    Steps with no visible frame on one side (leading or trailing occlusion)
    get zero velocity.
    """
    pos = np.asarray(positions, dtype=np.float64)
    prev, nxt = _visible_neighbours(visibility)
    j = prev[..., :-1]
    i = nxt[..., 1:]
    t = pos.shape[-2]
    ok = (j >= 0) & (i < t)
    jj = np.clip(j, 0, t - 1)
    ii = np.clip(i, 0, t - 1)
    xj = np.take_along_axis(pos, jj[..., None], axis=-2)
    xi = np.take_along_axis(pos, ii[..., None], axis=-2)
    span = np.where(ok, ii - jj, 1)[..., None]
    vel = (xi - xj) / span
    return np.where(ok[..., None], vel, 0.0)


def degenerate_tracks(visibility) -> np.ndarray:
    """Tracks never visible; their velocities are all zero by construction."""
    return ~np.asarray(visibility).astype(bool).any(axis=-1)


def positions_from_velocities(start, velocities) -> np.ndarray:
    start = np.asarray(start, dtype=np.float64)
    vel = np.asarray(velocities, dtype=np.float64)
    steps = np.concatenate([np.zeros_like(vel[..., :1, :]), vel], axis=-2)
    return start[..., None, :] + np.cumsum(steps, axis=-2)


def first_visible_positions(positions, visibility) -> np.ndarray:
    """Position at each track's first visible frame (frame 0 if never visible)."""
    _, nxt = _visible_neighbours(visibility)
    first = np.where(nxt[..., 0] < nxt.shape[-1], nxt[..., 0], 0)
    return np.take_along_axis(np.asarray(positions), first[..., None, None], axis=-2)[..., 0, :]


def fill_occluded(positions, visibility) -> np.ndarray:
    """Replace occluded coordinates with the values implied by the gap-filled velocities."""
    pos = np.asarray(positions, dtype=np.float64)
    vis = np.asarray(visibility).astype(bool)
    recon = positions_from_velocities(first_visible_positions(pos, vis), velocities_from_positions(pos, vis))
    return np.where(vis[..., None], pos, recon)


def displacement_conditioning(tracks: TrackSet) -> np.ndarray | None:
    """Mean start-to-end displacement over tracks visible at the final frame."""
    ts = tracks.valid()
    w = ts.visibility[:, -1].astype(np.float64)
    if w.sum() == 0:
        return None
    disp = ts.positions[:, -1] - ts.positions[:, 0]
    return (w[:, None] * disp).sum(axis=0) / w.sum()


def encode_target(tracks: TrackSet, scale_v: float = SCALE_V, scale_o: float = SCALE_O) -> DiffusionTarget:
    if scale_v <= 0 or scale_o <= 0:
        raise TrackError("scales must be positive")
    vel = velocities_from_positions(tracks.positions, tracks.visibility)
    return DiffusionTarget(vel * scale_v, tracks.visibility.astype(np.float64) * scale_o, scale_v, scale_o)


def decode_target(target: DiffusionTarget, start_points, t_cond: int, n_valid: int | None = None,
                  fps: float = 15.0) -> TrackSet:
    if target.scale_v <= 0 or target.scale_o <= 0:
        raise TrackError("scales must be positive")
    vel = np.asarray(target.scaled_velocities) / target.scale_v
    pos = positions_from_velocities(start_points, vel)
    vis = (np.asarray(target.scaled_occlusion) > 0.5 * target.scale_o).astype(np.uint8)
    return TrackSet(pos, vis, t_cond, n_valid, fps)


def make_conditioning(tracks: TrackSet, history: bool = True, displacement: bool = False,
                      displacement_value=None) -> Conditioning:
    """Build conditioning from the first ``t_cond`` frames only (no future leakage)."""
    tc = tracks.t_cond
    hist_pos = tracks.positions[:, :tc]
    hist_vis = tracks.visibility[:, :tc]
    hv = velocities_from_positions(hist_pos, hist_vis)
    if displacement_value is not None:
        d = np.asarray(displacement_value, dtype=np.float64)
    elif displacement:
        d = displacement_conditioning(tracks)
    else:
        d = None
    if not history:
        hv = np.zeros_like(hv)
        hist_vis = np.zeros_like(hist_vis)
    return Conditioning(hv, hist_vis.astype(np.float64), tracks.positions[:, 0].copy(), d, history)


# --------------------------------------------------------------------------
# bundle I/O


@dataclass
class Bundle:
    tracks: TrackSet
    features: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)


def write_bundle(path, tracks: TrackSet, features=None, provenance: dict | None = None,
                 scale_v: float = SCALE_V, scale_o: float = SCALE_O, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, t = tracks.visibility.shape
    meta = {
        "version": BUNDLE_VERSION,
        "n": n,
        "t": t,
        "t_cond": tracks.t_cond,
        "n_valid": tracks.n_valid,
        "fps": tracks.fps,
        "scales": {"v": scale_v, "o": scale_o},
        "provenance": provenance or {},
    }
    tracks.positions.astype("<f4").tofile(path / "positions.f32")
    tracks.visibility.astype(np.uint8).tofile(path / "visibility.u8")
    if features is not None:
        feats = np.asarray(features)
        meta["feature_dim"] = int(feats.shape[1])
        feats.astype("<f4").tofile(path / "features.f32")
    if extra:
        meta.update(extra)
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def read_bundle(path) -> Bundle:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except FileNotFoundError as exc:
        raise TrackError(f"{path} is not a track bundle (no meta.json)") from exc
    n, t = int(meta["n"]), int(meta["t"])
    pos = np.fromfile(path / "positions.f32", dtype="<f4")
    vis = np.fromfile(path / "visibility.u8", dtype=np.uint8)
    if pos.size != n * t * 2 or vis.size != n * t:
        raise TrackError(f"{path}: payload sizes do not match meta (n={n}, t={t})")
    tracks = TrackSet(pos.reshape(n, t, 2).astype(np.float64), vis.reshape(n, t),
                      int(meta["t_cond"]), int(meta.get("n_valid", n)), float(meta.get("fps", 15.0)))
    feats = None
    fpath = path / "features.f32"
    if fpath.exists():
        c = int(meta["feature_dim"])
        raw = np.fromfile(fpath, dtype="<f4")
        if raw.size != n * c:
            raise TrackError(f"{path}: features payload does not match [N, C]=[{n}, {c}]")
        feats = raw.reshape(n, c).astype(np.float64)
    return Bundle(tracks, feats, meta)


def list_bundles(root) -> list[Path]:
    root = Path(root)
    return sorted(p.parent for p in root.rglob("meta.json"))
