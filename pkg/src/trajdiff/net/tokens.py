"""Network configuration and per-track token assembly."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..trackcore import SCALE_O, SCALE_V, Conditioning, DiffusionTarget, target_dim
from .embed import position_encoding, sinusoidal_embed


@dataclass(frozen=True)
class NetConfig:
    depth: int = 4
    width: int = 128
    heads: int = 4
    feature_dim: int = 16
    t_cond: int = 4
    horizon: int = 32
    scale_v: float = SCALE_V
    scale_o: float = SCALE_O
    history_embed_dim: int = 16  # sinusoid width per history velocity component
    displacement_scale: float = SCALE_V  # d enters its linear embedding in scaled-velocity units
    time_embed_dim: int = 64
    mlp_ratio: int = 4
    diffusion_steps: int = 1000

    def __post_init__(self) -> None:
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.width % 4:
            raise ValueError("width must be divisible by 4 for the position encoding")
        if self.depth < 0 or self.heads < 1:
            raise ValueError("depth must be >= 0 and heads >= 1")
        if not 0 < self.t_cond < self.horizon:
            raise ValueError("need 0 < t_cond < horizon")
        if self.history_embed_dim % 2 or self.time_embed_dim % 2:
            raise ValueError("embedding dims must be even")

    @property
    def target_dim(self) -> int:
        return target_dim(self.horizon)

    @property
    def history_dim(self) -> int:
        return 2 * (self.t_cond - 1) * self.history_embed_dim + self.t_cond

    @property
    def token_dim(self) -> int:
        return self.target_dim + self.feature_dim + self.history_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def full_scale(cls, **kw) -> "NetConfig":
        return cls(depth=12, width=768, heads=12, **kw)


@dataclass
class TokenBatch:
    """Batched network inputs; every array has a leading batch axis."""
    tokens: np.ndarray  # [B, N, D_in]
    position_encoding: np.ndarray  # [B, N, D]
    attention_mask: np.ndarray  # [B, N], 1 = valid track
    tau: np.ndarray  # [B]
    displacement: np.ndarray  # [B, 2], zero where absent
    displacement_present: np.ndarray  # [B]

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    def astype(self, dtype) -> "TokenBatch":
        return TokenBatch(self.tokens.astype(dtype), self.position_encoding.astype(dtype),
                          self.attention_mask, self.tau, self.displacement.astype(dtype),
                          self.displacement_present.astype(dtype))

    def take(self, index) -> "TokenBatch":
        return TokenBatch(self.tokens[index], self.position_encoding[index], self.attention_mask[index],
                          self.tau[index], self.displacement[index], self.displacement_present[index])


@dataclass
class CondBatch:
    """Stacked conditioning for B examples, padded to a common N."""
    history_velocities: np.ndarray  # [B, N, T_c-1, 2]
    history_visibility: np.ndarray  # [B, N, T_c]
    start_points: np.ndarray  # [B, N, 2]
    displacement: np.ndarray  # [B, 2]
    displacement_present: np.ndarray  # [B]
    history_present: np.ndarray  # [B]

    @classmethod
    def stack(cls, conds: list[Conditioning]) -> "CondBatch":
        d = np.stack([c.displacement if c.displacement is not None else np.zeros(2) for c in conds])
        return cls(np.stack([c.history_velocities for c in conds]).astype(np.float64),
                   np.stack([c.history_visibility for c in conds]).astype(np.float64),
                   np.stack([c.start_points for c in conds]).astype(np.float64),
                   d, np.array([c.displacement is not None for c in conds], dtype=np.float64),
                   np.array([bool(c.history_present) for c in conds], dtype=np.float64))

    def repeat(self, k: int) -> "CondBatch":
        return CondBatch(*(np.repeat(a, k, axis=0) for a in (
            self.history_velocities, self.history_visibility, self.start_points,
            self.displacement, self.displacement_present, self.history_present)))


def history_channels(cond: CondBatch, config: NetConfig) -> np.ndarray:
    """Velocity-history sinusoids followed by the scaled visibility history; zero when absent."""
    b, n = cond.start_points.shape[:2]
    vel = sinusoidal_embed(config.scale_v * cond.history_velocities, config.history_embed_dim)
    vel = vel.reshape(b, n, -1)
    occ = config.scale_o * cond.history_visibility
    out = np.concatenate([vel, occ], axis=-1)
    return out * cond.history_present[:, None, None]


def build_tokens(target_noisy, cond: Conditioning | CondBatch, features, tau, config: NetConfig,
                 mask=None) -> TokenBatch:
    """Concatenate [features, history velocities, history visibility, noisy target] per track.

    Accepts a single example (``DiffusionTarget`` or flat ``[N, D_target]``
    with a ``Conditioning``) or a batch (``[B, N, D_target]`` with a
    ``CondBatch``).
    """
    if isinstance(target_noisy, DiffusionTarget):
        target_noisy = target_noisy.flat()
    z = np.asarray(target_noisy, dtype=np.float64)
    if isinstance(cond, Conditioning):
        cond = CondBatch.stack([cond])
    if z.ndim == 2:
        z = z[None]
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 2:
        feats = np.broadcast_to(feats, (z.shape[0],) + feats.shape)
    b, n, dz = z.shape
    if dz != config.target_dim:
        raise ValueError(f"target has {dz} channels, config expects {config.target_dim}")
    if feats.shape != (b, n, config.feature_dim):
        raise ValueError(f"features shape {feats.shape} != {(b, n, config.feature_dim)}")
    if cond.start_points.shape != (b, n, 2):
        raise ValueError(f"conditioning covers {cond.start_points.shape[:2]} tracks, target has {(b, n)}")
    if cond.history_visibility.shape[-1] != config.t_cond:
        raise ValueError("conditioning length does not match config.t_cond")
    tokens = np.concatenate([feats, history_channels(cond, config), z], axis=-1)
    pe = position_encoding(cond.start_points, config.width)
    if mask is None:
        mask = np.ones((b, n), dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), (b, n))
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (b,)).copy()
    disp = cond.displacement * cond.displacement_present[:, None]
    return TokenBatch(tokens, pe, mask.copy(), tau, disp, cond.displacement_present.copy())
