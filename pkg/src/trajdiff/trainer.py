"""Adam training loop with warmup plus cosine decay, clipping, EMA and checkpoints."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .diffusion import NoiseSchedule, TrainBatch, ema_update, masked_l1, q_sample, training_loss
from .net import (Checkpoint, CondBatch, ModelParams, NetConfig, NumericError, build_tokens, forward,
                  init_params, load_checkpoint, save_checkpoint)
from .trackcore import (MIN_VALID_TRACKS, TrackError, TrackSet, displacement_conditioning, encode_target,
                        fill_occluded, list_bundles, make_conditioning, read_bundle)

WINDOW_STRIDE = 8


@dataclass
class TrainConfig:
    lr: float = 5e-4
    warmup_epochs: int = 5
    total_epochs: int = 20
    batch_size: int = 16
    clip_norm: float = 5.0
    ema_decay: float = 0.9997
    ema_warmup: bool = True  # ramp the EMA decay as (1 + n) / (10 + n) early in training
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    history_dropout: float = 0.3
    displacement_dropout: float = 0.3
    max_tracks: int | None = None  # pad every example to this many tracks (default: dataset maximum)
    window_stride: int = WINDOW_STRIDE
    val_fraction: float = 0.05
    keep_last: int = 3
    init_seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


class TrainingHalted(NumericError):
    def __init__(self, message: str, last_good: Path | None):
        super().__init__(message)
        self.last_good = last_good


# --------------------------------------------------------------------------
# schedule and optimizer


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float = 5e-4) -> float:
    """Linear warmup from 0, then half-cosine decay reaching 0 at ``total_steps``."""
    if step <= 0:
        return 0.0
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if step >= total_steps:
        return 0.0
    progress = (step - warmup_steps) / max(total_steps - warmup_steps, 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = 5.0) -> tuple[dict[str, np.ndarray], float]:
    """Scale all tensors together when their global L2 norm exceeds ``max_norm``; returns (grads, norm)."""
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= g.dtype.type(factor)
    return grads, norm


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.values.items()},
                   {k: np.zeros_like(v) for k, v in params.values.items()})


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, p in params.values.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p -= step.astype(p.dtype)


# --------------------------------------------------------------------------
# data


@dataclass
class ExampleSet:
    """Padded training examples stacked along the first axis."""
    z0: np.ndarray  # [E, N, D_target]
    features: np.ndarray  # [E, N, C]
    history_velocities: np.ndarray  # [E, N, T_c-1, 2]
    history_visibility: np.ndarray  # [E, N, T_c]
    start_points: np.ndarray  # [E, N, 2]
    displacement: np.ndarray  # [E, 2]
    displacement_ok: np.ndarray  # [E]
    mask: np.ndarray  # [E, N]
    source: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.z0.shape[0]

    def take(self, idx) -> "ExampleSet":
        idx = np.asarray(idx)
        return ExampleSet(self.z0[idx], self.features[idx], self.history_velocities[idx],
                          self.history_visibility[idx], self.start_points[idx], self.displacement[idx],
                          self.displacement_ok[idx], self.mask[idx], [self.source[i] for i in idx])

    def batch(self, idx, history_present=None, displacement_present=None) -> TrainBatch:
        idx = np.asarray(idx)
        b = idx.size
        hp = np.ones(b) if history_present is None else np.asarray(history_present, dtype=np.float64)
        dp = self.displacement_ok[idx].astype(np.float64)
        if displacement_present is not None:
            dp = dp * np.asarray(displacement_present, dtype=np.float64)
        cond = CondBatch(self.history_velocities[idx] * hp[:, None, None, None],
                         self.history_visibility[idx] * hp[:, None, None],
                         self.start_points[idx], self.displacement[idx] * dp[:, None], dp, hp)
        return TrainBatch(self.z0[idx], self.features[idx], cond, self.mask[idx])


def windows(tracks: TrackSet, horizon: int, stride: int = WINDOW_STRIDE) -> list[TrackSet]:
    """Length-``horizon`` windows starting every ``stride`` frames."""
    if tracks.horizon < horizon:
        return []
    return [tracks.window(s, horizon) for s in range(0, tracks.horizon - horizon + 1, stride)]


def prepare_window(ts: TrackSet) -> TrackSet:
    """Keep valid tracks visible somewhere and fill occluded coordinates consistently."""
    ts = ts.valid()
    seen = ts.visibility.any(axis=1)
    ts = ts.subset(np.nonzero(seen)[0]) if seen.any() else ts
    return TrackSet(fill_occluded(ts.positions, ts.visibility), ts.visibility, ts.t_cond, None, ts.fps)


def build_examples(items: Iterable[tuple[TrackSet, np.ndarray, str]], config: NetConfig,
                   max_tracks: int | None = None, stride: int = WINDOW_STRIDE,
                   min_tracks: int = MIN_VALID_TRACKS) -> ExampleSet:
    """Window, encode and pad clips into an ExampleSet; windows with too few tracks are skipped."""
    rows = []
    for tracks, feats, name in items:
        if tracks.t_cond != config.t_cond:
            tracks = TrackSet(tracks.positions, tracks.visibility, config.t_cond, tracks.n_valid, tracks.fps)
        for w_i, win in enumerate(windows(tracks, config.horizon, stride)):
            keep = np.nonzero(win.valid().visibility.any(axis=1))[0]
            if keep.size < min_tracks:
                continue
            ts = prepare_window(win)
            f = np.asarray(feats, dtype=np.float64)[: tracks.n_valid][keep]
            rows.append((ts, f, f"{name}#{w_i}"))
    if not rows:
        raise TrackError("no usable training windows")
    n_max = max(ts.n_tracks for ts, _, _ in rows)
    n = max_tracks or n_max
    if n < n_max:
        raise TrackError(f"max_tracks={n} is smaller than the largest clip ({n_max} tracks)")
    e = len(rows)
    tc, td, c = config.t_cond, config.target_dim, config.feature_dim
    out = ExampleSet(np.zeros((e, n, td)), np.zeros((e, n, c)), np.zeros((e, n, tc - 1, 2)),
                     np.zeros((e, n, tc)), np.zeros((e, n, 2)), np.zeros((e, 2)), np.zeros(e, dtype=bool),
                     np.zeros((e, n), dtype=bool), [])
    for i, (ts, f, name) in enumerate(rows):
        k = ts.n_tracks
        if f.shape != (k, c):
            raise TrackError(f"{name}: features {f.shape} do not match ({k}, {c})")
        tgt = encode_target(ts, config.scale_v, config.scale_o).flat()
        cond = make_conditioning(ts, history=True)
        out.z0[i, :k] = tgt
        out.features[i, :k] = f
        out.history_velocities[i, :k] = cond.history_velocities
        out.history_visibility[i, :k] = cond.history_visibility
        out.start_points[i, :k] = cond.start_points
        out.start_points[i, k:] = cond.start_points[0]
        d = displacement_conditioning(ts)
        if d is not None:
            out.displacement[i] = d
            out.displacement_ok[i] = True
        out.mask[i, :k] = True
        out.source.append(name)
    return out


def load_bundle_items(root) -> list[tuple[TrackSet, np.ndarray, str]]:
    items = []
    for path in list_bundles(root):
        b = read_bundle(path)
        if b.meta.get("space", "normalized") != "normalized":
            raise TrackError(f"{path}: bundle is in {b.meta['space']} space; run the pipeline first")
        if b.features is None:
            raise TrackError(f"{path}: bundle has no features")
        items.append((b.tracks, b.features, path.name))
    return items


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: ModelParams
    ema: ModelParams
    losses: list[dict]
    checkpoints: list[Path]
    best: Path | None
    val_losses: list[float]


def split_train_val(examples: ExampleSet, fraction: float, seed: int) -> tuple[ExampleSet, ExampleSet | None]:
    """Hold out whole clips (all windows of a clip go to the same side)."""
    if fraction <= 0:
        return examples, None
    clips = sorted({s.split("#")[0] for s in examples.source})
    n_val = max(1, int(round(fraction * len(clips))))
    if n_val >= len(clips):
        return examples, None
    perm = np.random.default_rng([seed, 7]).permutation(len(clips))
    val_clips = {clips[i] for i in perm[:n_val]}
    is_val = np.array([s.split("#")[0] in val_clips for s in examples.source])
    return examples.take(np.nonzero(~is_val)[0]), examples.take(np.nonzero(is_val)[0])


def validation_loss(params: ModelParams, val: ExampleSet, config: NetConfig, batch_size: int,
                    seed: int) -> float:
    """L1 at fixed steps and noise, so successive epochs are comparable."""
    schedule = NoiseSchedule(config.diffusion_steps)
    rng = np.random.default_rng([seed, 99])
    total, count = 0.0, 0
    for s in range(0, len(val), batch_size):
        idx = np.arange(s, min(s + batch_size, len(val)))
        batch = val.batch(idx)
        tau = rng.integers(1, schedule.steps + 1, size=idx.size)
        zt = q_sample(batch.z0, tau, rng.standard_normal(batch.z0.shape), schedule)
        pred = forward(params, build_tokens(zt, batch.cond, batch.features, tau, config, batch.mask), config)
        loss, _ = masked_l1(pred, batch.z0.astype(pred.dtype), batch.mask)
        total += loss * idx.size
        count += idx.size
    return total / count


def _ema_decay(cfg: TrainConfig, n_updates: int) -> float:
    if not cfg.ema_warmup:
        return cfg.ema_decay
    return min(cfg.ema_decay, (1.0 + n_updates) / (10.0 + n_updates))


def _write_losses(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss", "grad_norm"])
        for r in rows:
            w.writerow([r["step"], repr(r["lr"]), repr(r["loss"]), repr(r["grad_norm"])])


def _read_losses(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path) as fh:
        return [{"step": int(r["step"]), "lr": float(r["lr"]), "loss": float(r["loss"]),
                 "grad_norm": float(r["grad_norm"])} for r in csv.DictReader(fh)]


def train(examples: ExampleSet, net_config: NetConfig, cfg: TrainConfig, out_dir=None,
          resume=None, max_steps: int | None = None, total_steps: int | None = None,
          log: Callable[[str], None] | None = None, dtype=np.float32) -> TrainResult:
    """Train the denoiser on ``examples``.

    Step ``s`` (1-based) of epoch ``e`` draws its batch order, diffusion
    steps, noise and conditioning dropout from generators seeded by
    ``(seed, e)`` and ``(seed, s)``, so a run resumed from an epoch-end
    checkpoint replays the uninterrupted run exactly.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    train_set, val_set = split_train_val(examples, cfg.val_fraction, cfg.seed)
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total = total_steps or cfg.total_epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch if total_steps is None else \
        int(round(total * cfg.warmup_epochs / cfg.total_epochs))

    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.config != net_config:
            raise ValueError("checkpoint network config differs from the requested one")
        params = ck.params
        ema = ck.ema
        state = AdamState(ck.adam_m, ck.adam_v, ck.step)
        step = ck.step
        best_val = ck.extra.get("best_val", math.inf)
        val_hist = list(ck.extra.get("val_losses", []))
    else:
        params = init_params(net_config, cfg.init_seed, dtype=dtype)
        ema = params.astype(np.float64)
        state = AdamState.zeros_like(params)
        step = 0
        best_val = math.inf
        val_hist = []
    losses = [r for r in _read_losses(out / "loss.csv") if r["step"] <= step] if (out and resume) else []
    checkpoints = sorted(out.glob("ckpt_*.bin")) if (out and resume) else []
    best_path = (out / "best.bin") if (out and (out / "best.bin").exists() and resume) else None
    last_good = checkpoints[-1] if checkpoints else None
    stop_at = total if max_steps is None else min(total, max_steps)
    schedule = NoiseSchedule(net_config.diffusion_steps)

    while step < stop_at:
        epoch = step // steps_per_epoch
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        pos = step - epoch * steps_per_epoch
        while pos < steps_per_epoch and step < stop_at:
            idx = order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
            step += 1
            pos += 1
            rng = np.random.default_rng([cfg.seed, 1, step])
            hp = (rng.random(idx.size) >= cfg.history_dropout).astype(np.float64)
            dp = (rng.random(idx.size) >= cfg.displacement_dropout).astype(np.float64)
            batch = train_set.batch(idx, hp, dp)
            params.zero_grad()
            try:
                loss, _ = training_loss(params, batch, net_config, rng, schedule)
            except NumericError as exc:
                loss = math.nan
                reason = str(exc)
            else:
                reason = "non-finite loss"
            if not math.isfinite(loss):
                if out is not None:
                    _write_losses(out / "loss.csv", losses)
                raise TrainingHalted(f"{reason} at step {step}", last_good)
            grads, norm = clip_gradients(params.grads, cfg.clip_norm)
            lr = lr_at(step, total, warmup, cfg.lr)
            adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            if not params.all_finite():
                raise TrainingHalted(f"non-finite parameters after step {step}", last_good)
            ema_update(ema, params, _ema_decay(cfg, step))
            losses.append({"step": step, "lr": lr, "loss": loss, "grad_norm": norm})
            if log and (step % 50 == 0 or step == 1):
                log(f"step {step}/{total} lr {lr:.2e} loss {loss:.5f} |g| {norm:.3f}")
        if pos == steps_per_epoch or step == stop_at:
            ema_f = ema.astype(params.dtype)
            if val_set is not None:
                val = validation_loss(ema_f, val_set, net_config, cfg.batch_size, cfg.seed)
            else:
                val = float(np.mean([r["loss"] for r in losses[-steps_per_epoch:]]))
            val_hist.append(val)
            if out is not None:
                extra = {"train_config": cfg.to_dict(), "best_val": min(best_val, val), "val_losses": val_hist,
                         "total_steps": total, "warmup_steps": warmup}
                ck = Checkpoint(net_config, params, ema, state.m, state.v, step, extra)
                path = save_checkpoint(out / f"ckpt_{step:08d}.bin", ck)
                checkpoints.append(path)
                last_good = path
                if val < best_val:
                    best_path = save_checkpoint(out / "best.bin", ck)
                while len(checkpoints) > cfg.keep_last:
                    checkpoints.pop(0).unlink(missing_ok=True)
                _write_losses(out / "loss.csv", losses)
            best_val = min(best_val, val)
            if log:
                log(f"epoch {epoch + 1}: val {val:.5f}")
    return TrainResult(params, ema, losses, checkpoints, best_path, val_hist)


def ema_model(result_or_ckpt) -> ModelParams:
    """EMA weights in float32, as used for every evaluation."""
    ema = result_or_ckpt.ema
    return ema.astype(np.float32)


def examples_from_clips(clips: Sequence, config: NetConfig, max_tracks: int | None = None,
                        stride: int = WINDOW_STRIDE) -> ExampleSet:
    items = [(c.scene.tracks, c.features, f"clip_{c.index:05d}") for c in clips]
    return build_examples(items, config, max_tracks, stride)
