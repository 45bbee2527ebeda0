"""Displacement statistics across clips: log histograms plus log-normal and power-law fits."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from ..trackcore import TrackSet


@dataclass
class Fit:
    params: dict[str, float]
    r2: float | None


@dataclass
class MotionStats:
    displacements: np.ndarray  # per-clip mean displacement magnitude
    dx: np.ndarray
    dy: np.ndarray
    n_zero: int
    bin_edges: np.ndarray  # in log(displacement)
    counts: np.ndarray
    lognormal: Fit
    powerlaw: Fit
    degenerate: bool
    extra_histograms: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])

    @property
    def lognormal_better(self) -> bool:
        return (self.lognormal.r2 is not None and self.powerlaw.r2 is not None
                and self.lognormal.r2 > self.powerlaw.r2)


def clip_displacement(tracks: TrackSet) -> tuple[float, float, float] | None:
    """Mean |end - start| (and mean |dx|, |dy|) over tracks visible at both ends."""
    ts = tracks.valid()
    both = (ts.visibility[:, 0] == 1) & (ts.visibility[:, -1] == 1)
    if not both.any():
        return None
    d = ts.positions[both, -1] - ts.positions[both, 0]
    return float(np.linalg.norm(d, axis=1).mean()), float(np.abs(d[:, 0]).mean()), float(np.abs(d[:, 1]).mean())


def _r2(y: np.ndarray, pred: np.ndarray) -> float | None:
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot <= 0:
        return None
    return 1.0 - float(((y - pred) ** 2).sum()) / ss_tot


def _log_hist(values: np.ndarray, bins: int) -> tuple[np.ndarray, np.ndarray]:
    logs = np.log(values)
    lo, hi = logs.min(), logs.max()
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(logs, bins=bins, range=(lo, hi))
    return counts, edges


def fit_distributions(values: np.ndarray, bins: int = 30) -> tuple[np.ndarray, np.ndarray, Fit, Fit]:
    """Fit both laws and score each by R^2 of log bin counts.

    The log-normal is fitted by the moments of log(values); the power law
    p(x) ~ x^-alpha is a least-squares line through (log x, log count).
    """
    logs = np.log(values)
    mu, sigma = float(logs.mean()), float(logs.std())
    counts, edges = _log_hist(values, bins)
    centers = 0.5 * (edges[1:] + edges[:-1])
    width = edges[1] - edges[0]
    nz = counts > 0
    y = np.log(counts[nz])
    x = centers[nz]
    if sigma > 0:
        dens = np.exp(-0.5 * ((x - mu) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))
        pred_ln = np.log(np.maximum(values.size * width * dens, 1e-300))
        ln = Fit({"mu": mu, "sigma": sigma}, _r2(y, pred_ln))
    else:
        ln = Fit({"mu": mu, "sigma": 0.0}, None)
    if nz.sum() >= 2 and np.ptp(x) > 0:
        slope, intercept = np.polyfit(x, y, 1)
        # a count per log-bin ~ x^(1 - alpha)
        pl = Fit({"alpha": float(1.0 - slope), "intercept": float(intercept)}, _r2(y, slope * x + intercept))
    else:
        pl = Fit({"alpha": float("nan"), "intercept": float("nan")}, None)
    return counts, edges, ln, pl


def motion_statistics(tracksets: Iterable[TrackSet], bins: int = 30, min_clips: int = 100) -> MotionStats:
    rows = [clip_displacement(ts) for ts in tracksets]
    rows = [r for r in rows if r is not None]
    if len(rows) < min_clips:
        raise ValueError(f"need at least {min_clips} clips with end-visible tracks, got {len(rows)}")
    arr = np.asarray(rows)
    disp, dx, dy = arr[:, 0], arr[:, 1], arr[:, 2]
    positive = disp > 0
    n_zero = int((~positive).sum())
    counts, edges, ln, pl = fit_distributions(disp[positive], bins)
    extra = {}
    for name, vals in (("dx", dx), ("dy", dy)):
        v = vals[vals > 0]
        if v.size:
            extra[name] = _log_hist(v, bins)
    degenerate = ln.params["sigma"] == 0 or pl.r2 is None
    return MotionStats(disp, dx, dy, n_zero, edges, counts, ln, pl, degenerate, extra)


def write_stats_csv(path, stats: MotionStats) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_center", "count"])
        for c, n in zip(stats.bin_centers, stats.counts):
            w.writerow([f"{c:.6f}", int(n)])


def histogram_svg(stats: MotionStats, width: int = 480, height: int = 320) -> str:
    """Log-frequency histogram over binned log displacement with both fitted curves."""
    pad = 40
    centers = stats.bin_centers
    counts = stats.counts.astype(float)
    bw = stats.bin_edges[1] - stats.bin_edges[0]
    logc = np.log(np.maximum(counts, 1e-9))
    ymax = max(float(np.log(max(counts.max(), 1.0))) + 0.5, 1.0)
    ymin = -0.5
    x0, x1 = float(stats.bin_edges[0]), float(stats.bin_edges[-1])

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (np.clip(y, ymin, ymax) - ymin) / (ymax - ymin) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for c, lc, n in zip(centers, logc, counts):
        if n <= 0:
            continue
        xa, xb = sx(c - bw / 2), sx(c + bw / 2)
        parts.append(f'<rect x="{xa:.2f}" y="{sy(lc):.2f}" width="{xb - xa:.2f}" '
                     f'height="{sy(ymin) - sy(lc):.2f}" fill="#9ab"/>')
    xs = np.linspace(x0, x1, 100)
    n_total = counts.sum()
    mu, sigma = stats.lognormal.params["mu"], stats.lognormal.params["sigma"]
    if sigma > 0:
        dens = np.exp(-0.5 * ((xs - mu) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))
        ys = np.log(np.maximum(n_total * bw * dens, 1e-9))
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="purple" stroke-width="2"/>')
    alpha = stats.powerlaw.params.get("alpha", float("nan"))
    if np.isfinite(alpha):
        ys = (1 - alpha) * xs + stats.powerlaw.params["intercept"]
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="orange" stroke-width="2"/>')
    parts.append(f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">'
                 'log displacement</text>')
    parts.append(f'<text x="12" y="{height / 2}" font-size="12" '
                 f'transform="rotate(-90 12 {height / 2})" text-anchor="middle">log count</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def write_stats(out_dir, stats: MotionStats) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_stats_csv(out / "stats.csv", stats)
    (out / "histogram.svg").write_text(histogram_svg(stats))
