"""Best-of-K evaluation over motion buckets, and report files."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..diffusion import DDIMParams, ddim_sample, decode_samples
from ..net import CondBatch, ModelParams, NetConfig
from ..trackcore import Conditioning, TrackSet, displacement_conditioning, make_conditioning
from . import metrics as M
from .baselines import BASELINES

EXAMPLE_METRICS = ("ADE", "FDE", "PWT", "VMD")
DIST_METRICS = ("FD_V", "FD_A", "Var_V", "Var_A", "FVMD")
HIGHER_IS_BETTER = {"PWT"}
COMBINED = "all"


@dataclass(frozen=True)
class EvalConfig:
    k: int = 5
    pwt_thresholds: tuple = M.PWT_THRESHOLDS
    pixel_scale: float = M.PIXEL_SCALE
    bucket_edges: tuple = (0.5, 1.5)
    fvmd_grid: tuple = M.FVMD_GRID
    fvmd_angular_bins: int = M.FVMD_ANGLE_BINS
    squared_ade: bool = False

    def __post_init__(self) -> None:
        if list(self.pwt_thresholds) != sorted(self.pwt_thresholds):
            raise ValueError("PWT thresholds must be ascending")
        if any(g <= 0 for g in self.fvmd_grid) or self.fvmd_angular_bins <= 0:
            raise ValueError("FVMD grid and bins must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class EvalExample:
    tracks: TrackSet  # ground truth, valid tracks only
    features: np.ndarray  # [N, C]
    name: str = ""
    bucket: str = ""


def mean_frame_motion_px(tracks: TrackSet, pixel_scale: float = M.PIXEL_SCALE) -> float:
    ts = tracks.valid()
    step = np.linalg.norm(np.diff(ts.positions, axis=1), axis=-1) * pixel_scale
    both = (ts.visibility[:, 1:] == 1) & (ts.visibility[:, :-1] == 1)
    return float(step[both].mean()) if both.any() else 0.0


def assign_bucket(tracks: TrackSet, edges=(0.5, 1.5), pixel_scale: float = M.PIXEL_SCALE) -> str:
    m = mean_frame_motion_px(tracks, pixel_scale)
    if m < edges[0]:
        return "low"
    return "medium" if m <= edges[1] else "high"


def best_of_k(values: Sequence[float], direction: str = "min") -> float:
    vals = np.asarray([v for v in values if not math.isnan(v)], dtype=np.float64)
    if vals.size == 0:
        return math.nan
    if direction == "min":
        return float(vals.min())
    if direction == "max":
        return float(vals.max())
    raise ValueError(f"direction must be 'min' or 'max', got {direction!r}")


def eval_examples(items, horizon: int, t_cond: int, edges=(0.5, 1.5)) -> list[EvalExample]:
    """First length-``horizon`` window of every ``(tracks, features, name)`` item."""
    from ..trainer import prepare_window

    out = []
    for tracks, feats, name in items:
        if tracks.horizon < horizon:
            continue
        win = TrackSet(tracks.positions[:, :horizon], tracks.visibility[:, :horizon], t_cond,
                       tracks.n_valid, tracks.fps)
        seen = win.valid().visibility.any(axis=1)
        ts = prepare_window(win)
        f = np.asarray(feats, dtype=np.float64)[: tracks.n_valid][seen]
        out.append(EvalExample(ts, f, name, assign_bucket(ts, edges)))
    return out


# --------------------------------------------------------------------------
# predictors: callables mapping a list of examples to K TrackSets each

Predictor = Callable[[Sequence[EvalExample]], list[list[TrackSet]]]


def baseline_predictor(name: str) -> Predictor:
    fn = BASELINES[name]

    def predict(examples):
        if name == "oracle-vel":
            return [[fn(ex.tracks, ex.tracks)] for ex in examples]
        return [[fn(ex.tracks)] for ex in examples]
    return predict


def _padded_batch(examples: Sequence[EvalExample], conds: list[Conditioning], config: NetConfig):
    n = max(ex.tracks.n_tracks for ex in examples)
    padded = []
    feats = np.zeros((len(examples), n, config.feature_dim))
    mask = np.zeros((len(examples), n), dtype=bool)
    for i, (ex, c) in enumerate(zip(examples, conds)):
        k = ex.tracks.n_tracks
        hv = np.zeros((n, config.t_cond - 1, 2))
        hvis = np.zeros((n, config.t_cond))
        sp = np.repeat(c.start_points[:1], n, axis=0)
        hv[:k], hvis[:k], sp[:k] = c.history_velocities, c.history_visibility, c.start_points
        padded.append(Conditioning(hv, hvis, sp, c.displacement, c.history_present))
        feats[i, :k] = ex.features
        mask[i, :k] = True
    return CondBatch.stack(padded), feats, mask


def sample_model(params: ModelParams, config: NetConfig, examples: Sequence[EvalExample], k: int,
                 seed: int = 0, ddim: DDIMParams = DDIMParams(), history: bool = True,
                 displacement: Callable[[TrackSet], np.ndarray | None] | None = None,
                 chunk: int = 64) -> list[list[TrackSet]]:
    """Draw ``k`` samples per example; sample ``j`` of every example uses noise seeded by ``seed + j``.

    ``displacement(gt_tracks)`` supplies the displacement prompt (None for unconditioned sampling).
    """
    conds = []
    for ex in examples:
        d = displacement(ex.tracks) if displacement is not None else None
        conds.append(make_conditioning(ex.tracks, history=history, displacement_value=d))
    out: list[list[TrackSet]] = [[] for _ in examples]
    for j in range(k):
        for s in range(0, len(examples), chunk):
            sub = list(range(s, min(s + chunk, len(examples))))
            cond, feats, mask = _padded_batch([examples[i] for i in sub], [conds[i] for i in sub], config)
            rng = np.random.default_rng([seed + j, s])
            flat = ddim_sample(params, cond, feats, config, ddim, rng, mask)
            decoded = decode_samples(flat, cond, config)
            for i, ts in zip(sub, decoded):
                n = examples[i].tracks.n_tracks
                out[i].append(TrackSet(ts.positions[:n], ts.visibility[:n], config.t_cond, None,
                                       examples[i].tracks.fps))
    return out


def model_predictor(params: ModelParams, config: NetConfig, k: int = 5, seed: int = 0,
                    ddim: DDIMParams = DDIMParams(), conditioned: bool = False,
                    displacement_scale: float = 1.0) -> Predictor:
    def disp(gt):
        d = displacement_conditioning(gt)
        return None if d is None else displacement_scale * d

    def predict(examples):
        return sample_model(params, config, examples, k, seed, ddim, True, disp if conditioned else None)
    return predict


# --------------------------------------------------------------------------
# evaluation


@dataclass
class MetricReport:
    method: str
    values: dict[str, dict[str, float]] = field(default_factory=dict)  # bucket -> metric -> value
    counts: dict[str, int] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, str, float]]:
        out = []
        for bucket in sorted(self.values, key=_bucket_order):
            for metric in (*EXAMPLE_METRICS, *DIST_METRICS):
                if metric in self.values[bucket]:
                    out.append((self.method, bucket, metric, self.values[bucket][metric]))
        return out


def _bucket_order(b: str) -> tuple[int, str]:
    order = {"low": 0, "medium": 1, "high": 2, COMBINED: 3}
    return order.get(b, 4), b


def _distribution_metrics(preds: list[TrackSet], gts: list[TrackSet], cfg: EvalConfig, t_cond: int) -> dict:
    res: dict[str, float] = {}
    pv, gv, pa, ga = [], [], [], []
    for p, g in zip(preds, gts):
        full = M.fully_visible_tracks(g.visibility, t_cond)
        if full.any():
            pv.append(M.motion_vectors(p.positions[full], t_cond, 1, cfg.pixel_scale))
            gv.append(M.motion_vectors(g.positions[full], t_cond, 1, cfg.pixel_scale))
            pa.append(M.motion_vectors(p.positions[full], t_cond, 2, cfg.pixel_scale))
            ga.append(M.motion_vectors(g.positions[full], t_cond, 2, cfg.pixel_scale))
    if pv and sum(x.shape[0] for x in pv) >= 2:
        res["FD_V"] = M.frechet_gaussian(np.concatenate(pv), np.concatenate(gv))
        res["FD_A"] = M.frechet_gaussian(np.concatenate(pa), np.concatenate(ga))
    else:
        res["FD_V"] = res["FD_A"] = math.nan
    pos = [p.positions for p in preds]
    res["Var_V"] = float(np.var(np.concatenate([np.diff(x[:, t_cond:] * cfg.pixel_scale, 1, axis=1).ravel()
                                                for x in pos])))
    res["Var_A"] = float(np.var(np.concatenate([np.diff(x[:, t_cond:] * cfg.pixel_scale, 2, axis=1).ravel()
                                                for x in pos])))
    if len(preds) >= 2:
        fp = np.stack([M.fvmd_features(p.positions, p.visibility, t_cond, cfg.fvmd_grid, cfg.fvmd_angular_bins,
                                       cfg.pixel_scale) for p in preds])
        fg = np.stack([M.fvmd_features(g.positions, g.visibility, t_cond, cfg.fvmd_grid, cfg.fvmd_angular_bins,
                                       cfg.pixel_scale) for g in gts])
        res["FVMD"] = M.fvmd(fp, fg)
    else:
        res["FVMD"] = math.nan
    return res


def example_metrics(samples: list[TrackSet], gt: TrackSet, cfg: EvalConfig) -> dict[str, float]:
    """Best-of-K example-level metrics for one example."""
    tc = gt.t_cond
    ades, fdes, pwts, vmds = [], [], [], []
    for s in samples:
        a, f = M.ade_fde(s.positions, gt.positions, gt.visibility, tc, cfg.squared_ade)
        ades.append(a)
        fdes.append(f)
        pwts.append(M.pwt(s.positions, gt.positions, gt.visibility, tc, cfg.pwt_thresholds, cfg.pixel_scale))
        vmds.append(float(np.linalg.norm(
            M.fvmd_features(s.positions, s.visibility, tc, cfg.fvmd_grid, cfg.fvmd_angular_bins, cfg.pixel_scale)
            - M.fvmd_features(gt.positions, gt.visibility, tc, cfg.fvmd_grid, cfg.fvmd_angular_bins,
                              cfg.pixel_scale))))
    return {"ADE": best_of_k(ades, "min"), "FDE": best_of_k(fdes, "min"), "PWT": best_of_k(pwts, "max"),
            "VMD": best_of_k(vmds, "min")}


def evaluate(method: str, predictor: Predictor, examples: Sequence[EvalExample],
             cfg: EvalConfig = EvalConfig(), samples: list[list[TrackSet]] | None = None) -> MetricReport:
    """Per-bucket and combined metrics; distribution metrics use each example's first sample."""
    samples = samples if samples is not None else predictor(examples)
    if len(samples) != len(examples):
        raise ValueError("predictor returned the wrong number of examples")
    per_example = [example_metrics(s[:cfg.k], ex.tracks, cfg) for s, ex in zip(samples, examples)]
    buckets = [ex.bucket or assign_bucket(ex.tracks, cfg.bucket_edges, cfg.pixel_scale) for ex in examples]
    report = MetricReport(method)
    groups = {b: [i for i, x in enumerate(buckets) if x == b] for b in sorted(set(buckets), key=_bucket_order)}
    groups[COMBINED] = list(range(len(examples)))
    t_cond = examples[0].tracks.t_cond
    for b, idx in groups.items():
        if not idx:
            continue
        vals = {m: float(np.nanmean([per_example[i][m] for i in idx])) for m in EXAMPLE_METRICS}
        vals.update(_distribution_metrics([samples[i][0] for i in idx], [examples[i].tracks for i in idx],
                                          cfg, t_cond))
        report.values[b] = vals
        report.counts[b] = len(idx)
    return report


def write_report(out_dir, reports: Sequence[MetricReport]) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "report.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "bucket", "metric", "value"])
        for r in reports:
            for row in r.rows():
                w.writerow([row[0], row[1], row[2], f"{row[3]:.6g}"])
    json_path = out / "report.json"
    payload = [{"method": r.method, "counts": r.counts,
                "values": {b: {m: (None if math.isnan(v) else v) for m, v in d.items()}
                           for b, d in r.values.items()}} for r in reports]
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return csv_path, json_path
