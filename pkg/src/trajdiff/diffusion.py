"""Noise schedule, forward corruption, L1 training objective, DDIM sampling and EMA."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .net import CondBatch, ModelParams, NetConfig, NumericError, backward, build_tokens, forward
from .trackcore import Conditioning, DiffusionTarget, TrackSet, decode_target


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.steps)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        """``alpha_bars[t - 1]`` is the cumulative product up to step t."""
        return np.cumprod(self.alphas)

    def alpha_bar(self, tau) -> np.ndarray:
        """Cumulative alpha at integer step(s) ``tau`` in [0, S]; step 0 is the clean signal."""
        tau = np.asarray(tau)
        if np.any(tau < 0) or np.any(tau > self.steps):
            raise ValueError(f"diffusion step outside [0, {self.steps}]")
        table = np.concatenate([[1.0], self.alpha_bars])
        return table[tau]


@dataclass(frozen=True)
class DDIMParams:
    n_steps: int = 100
    eta: float = 0.0

    def stride(self, schedule: NoiseSchedule) -> int:
        if self.n_steps < 1 or schedule.steps % self.n_steps:
            raise ValueError(f"{self.n_steps} sampling steps do not divide {schedule.steps}")
        return schedule.steps // self.n_steps

    def timesteps(self, schedule: NoiseSchedule) -> np.ndarray:
        """Descending subsequence S, S - stride, ..., stride."""
        delta = self.stride(schedule)
        return np.arange(schedule.steps, 0, -delta)

    def sigma(self, schedule: NoiseSchedule, tau: int) -> float:
        delta = self.stride(schedule)
        ab_t = float(schedule.alpha_bar(tau))
        ab_prev = float(schedule.alpha_bar(tau - delta))
        return self.eta * np.sqrt((1 - ab_prev) / (1 - ab_t)) * np.sqrt(1 - ab_t / ab_prev)


def q_sample(z0, tau, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Corrupt ``z0`` to step ``tau`` (broadcast over a leading batch axis when ``tau`` is an array)."""
    tau = np.asarray(tau)
    if np.any(tau < 1) or np.any(tau > schedule.steps):
        raise ValueError(f"tau must lie in [1, {schedule.steps}]")
    z0 = np.asarray(z0)
    ab = schedule.alpha_bar(tau).reshape(tau.shape + (1,) * (z0.ndim - tau.ndim))
    return np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps


# --------------------------------------------------------------------------
# training objective


@dataclass
class TrainBatch:
    """Clean targets and conditioning for B padded examples."""
    z0: np.ndarray  # [B, N, D_target]
    features: np.ndarray  # [B, N, C]
    cond: CondBatch
    mask: np.ndarray  # [B, N] bool

    @property
    def batch_size(self) -> int:
        return self.z0.shape[0]


def masked_l1(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error over valid tracks and all channels, with its gradient w.r.t. ``pred``."""
    mask = np.asarray(mask, dtype=bool)
    count = mask.sum() * pred.shape[-1]
    if count == 0:
        raise ValueError("all tracks in the batch are masked")
    diff = (pred - target) * mask[..., None]
    loss = float(np.abs(diff).sum() / count)
    grad = np.sign(diff) / count
    return loss, grad.astype(pred.dtype)


def training_loss(params: ModelParams, batch: TrainBatch, config: NetConfig, rng: np.random.Generator,
                  schedule: NoiseSchedule | None = None, tau=None, eps=None) -> tuple[float, dict]:
    """L1 between the clean target and the network's prediction from a noised copy.

    Adds gradients into ``params.grads`` and returns ``(loss, grads)``.
    """
    schedule = schedule or NoiseSchedule(config.diffusion_steps)
    b = batch.batch_size
    if tau is None:
        tau = rng.integers(1, schedule.steps + 1, size=b)
    if eps is None:
        eps = rng.standard_normal(batch.z0.shape)
    zt = q_sample(batch.z0, tau, eps, schedule)
    tokens = build_tokens(zt, batch.cond, batch.features, tau, config, batch.mask)
    pred, cache = forward(params, tokens, config, keep_cache=True)
    loss, dpred = masked_l1(pred, batch.z0.astype(pred.dtype), batch.mask)
    grads = backward(params, cache, dpred)
    return loss, grads


# --------------------------------------------------------------------------
# sampling

Denoiser = Callable[[np.ndarray, int], np.ndarray]


def history_targets(cond: CondBatch, config: NetConfig) -> tuple[np.ndarray, np.ndarray]:
    """Scaled history velocities and visibility in flat target layout plus the slot mask they fill."""
    b, n = cond.start_points.shape[:2]
    tc, t = config.t_cond, config.horizon
    values = np.zeros((b, n, config.target_dim))
    slots = np.zeros(config.target_dim, dtype=bool)
    nv = 2 * (tc - 1)
    values[..., :nv] = config.scale_v * cond.history_velocities.reshape(b, n, nv)
    values[..., 2 * (t - 1):2 * (t - 1) + tc] = config.scale_o * cond.history_visibility
    slots[:nv] = True
    slots[2 * (t - 1):2 * (t - 1) + tc] = True
    return values, slots


def ddim_loop(denoise: Denoiser, z_init: np.ndarray, schedule: NoiseSchedule, ddim: DDIMParams,
              rng: np.random.Generator | None = None, start_tau: int | None = None) -> np.ndarray:
    """Run the DDIM update from ``z_init`` at ``start_tau`` down to a clean estimate.

    ``denoise(z, tau)`` returns the predicted clean target.
    """
    delta = ddim.stride(schedule)
    start_tau = schedule.steps if start_tau is None else start_tau
    if start_tau % delta:
        raise ValueError(f"start step {start_tau} is not on the stride-{delta} grid")
    z = np.asarray(z_init, dtype=np.float64)
    z0_hat = z
    for tau in range(start_tau, 0, -delta):
        z0_hat = np.asarray(denoise(z, tau), dtype=np.float64)
        ab = float(schedule.alpha_bar(tau))
        ab_prev = float(schedule.alpha_bar(tau - delta))
        eps_hat = (z - np.sqrt(ab) * z0_hat) / np.sqrt(1 - ab)
        sigma = ddim.sigma(schedule, tau)
        z = np.sqrt(ab_prev) * z0_hat + np.sqrt(max(1 - ab_prev - sigma ** 2, 0.0)) * eps_hat
        if sigma > 0:
            if rng is None:
                raise ValueError("stochastic sampling (eta > 0) needs an rng")
            z = z + sigma * rng.standard_normal(z.shape)
        if not np.isfinite(z).all():
            raise NumericError(f"non-finite sampler state at step {tau}")
    return z


def ddim_sample(params: ModelParams, cond: Conditioning | CondBatch, features, config: NetConfig,
                ddim: DDIMParams = DDIMParams(), rng: np.random.Generator | None = None, mask=None,
                denoiser: Denoiser | None = None, clamp_history: bool = True) -> np.ndarray:
    """Sample clean flat targets ``[B, N, D_target]`` for a batch of conditionings.

    The denoiser defaults to the network evaluated with ``params``.  When
    history is present its known channels overwrite the network's estimate
    at every step.
    """
    rng = rng or np.random.default_rng(0)
    if isinstance(cond, Conditioning):
        cond = CondBatch.stack([cond])
    feats = np.asarray(features, dtype=np.float64)
    b, n = cond.start_points.shape[:2]
    if feats.ndim == 2:
        feats = np.broadcast_to(feats, (b,) + feats.shape)
    schedule = NoiseSchedule(config.diffusion_steps)
    hist_vals, slots = history_targets(cond, config)
    keep = (cond.history_present[:, None, None] > 0) & slots if clamp_history else np.zeros_like(slots)

    def net_denoise(z, tau):
        tokens = build_tokens(z, cond, feats, np.full(b, tau), config, mask)
        return forward(params, tokens, config).astype(np.float64)

    base = denoiser or net_denoise

    def denoise(z, tau):
        return np.where(keep, hist_vals, base(z, tau))

    z_init = rng.standard_normal((b, n, config.target_dim))
    return ddim_loop(denoise, z_init, schedule, ddim, rng)


def decode_samples(flat: np.ndarray, cond: CondBatch, config: NetConfig, n_valid=None,
                   fps: float = 15.0) -> list[TrackSet]:
    """Turn sampled flat targets into positions by cumulative summation from the start points."""
    out = []
    for i in range(flat.shape[0]):
        target = DiffusionTarget.from_flat(flat[i], config.horizon, config.scale_v, config.scale_o)
        nv = None if n_valid is None else int(np.asarray(n_valid).reshape(-1)[min(i, np.size(n_valid) - 1)])
        out.append(decode_target(target, cond.start_points[i], config.t_cond, nv, fps))
    return out


# --------------------------------------------------------------------------
# EMA


def ema_update(ema, params, decay: float = 0.9997):
    """In-place ``ema <- decay * ema + (1 - decay) * params``; accepts ModelParams or dicts."""
    ev = ema.values if isinstance(ema, ModelParams) else ema
    pv = params.values if isinstance(params, ModelParams) else params
    for k, v in ev.items():
        v *= decay
        v += (1.0 - decay) * pv[k]
    return ema
