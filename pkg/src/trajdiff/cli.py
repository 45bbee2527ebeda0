"""``trajdiff`` command line: gen, pipeline, train, sample, eval, stats.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Failures print a one-line JSON error record on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "run_manifest.json"
log = logging.getLogger("trajdiff")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# --------------------------------------------------------------------------
# config and manifest helpers


def load_config(path, allowed: set[str] | None = None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    if allowed is not None:
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ConfigError(f"unknown config keys in {path}: {unknown}")
    return data


def _dataclass_keys(cls) -> set[str]:
    from dataclasses import fields
    return {f.name for f in fields(cls)}


def _strict(cls, data: dict, what: str):
    unknown = sorted(set(data) - _dataclass_keys(cls))
    if unknown:
        raise ConfigError(f"unknown {what} keys: {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def artifact_checksums(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): file_sha256(p) for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != MANIFEST}


def directory_checksum(root) -> str:
    h = hashlib.sha256()
    for rel, digest in artifact_checksums(Path(root)).items():
        h.update(f"{rel}\0{digest}\n".encode())
    return h.hexdigest()


def code_version() -> str:
    from . import __version__
    h = hashlib.sha256()
    pkg = Path(__file__).parent
    for p in sorted(pkg.rglob("*.py")):
        h.update(str(p.relative_to(pkg)).encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def write_manifest(out: Path, command: str, config: dict, seed, extra: dict | None = None) -> None:
    canonical = json.dumps(config, sort_keys=True, default=str)
    manifest = {
        "command": command,
        "config": json.loads(canonical),
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": seed,
        "code_version": code_version(),
        "artifacts": artifact_checksums(out),
    }
    if extra:
        manifest.update(extra)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _fresh_output(out: Path, force: bool) -> Path:
    """Staging directory next to ``out``; the caller publishes it with ``_publish``."""
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force to replace it)")
    out.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))


def _publish(stage: Path, out: Path) -> None:
    if out.exists():
        shutil.rmtree(out)
    os.replace(stage, out)


def _staged(args, body):
    """Run ``body(stage_dir)`` and publish the result only on success (no partial output)."""
    out = Path(args.out)
    stage = _fresh_output(out, args.force)
    try:
        result = body(stage)
        _publish(stage, out)
        return result
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise


def _parse_pair(text: str | None):
    if text is None:
        return None
    if text == "gt":
        return "gt"
    try:
        dx, dy = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"expected 'dx,dy' or 'gt', got {text!r}") from exc
    return (dx, dy)


# --------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    from .synthkin import BUCKETS, DatasetConfig, generate_dataset, write_dataset

    cfg = load_config(args.config)
    if args.clips is not None:
        cfg["n_clips"] = args.clips
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.buckets_only:
        buckets = tuple(b.strip() for b in args.buckets_only.split(","))
        bad = [b for b in buckets if b not in BUCKETS]
        if bad:
            raise ConfigError(f"unknown bucket(s) {bad}; choose from {BUCKETS}")
        cfg["buckets"] = buckets
    if args.camera:
        cfg["camera"] = True
    dcfg = _strict(DatasetConfig, cfg, "dataset config")

    def body(stage: Path):
        clips = generate_dataset(dcfg)
        write_dataset(stage, clips)
        resolved = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(dcfg).items()}
        write_manifest(stage, "gen", resolved, dcfg.seed, {"n_clips": len(clips)})
        log.info("wrote %d clips", len(clips))
    _staged(args, body)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    import numpy as np

    from .pipeline import estimate_stabilization, stabilize_tracks
    from .trackcore import TrackSet, list_bundles, normalize_to_bbox, read_bundle, write_bundle

    cfg = load_config(args.config, {"seed", "anchor_frame", "margin"})
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    anchor = int(cfg.get("anchor_frame", 0))
    margin = float(cfg.get("margin", 0.5))
    bundles = list_bundles(args.data)
    if not bundles:
        raise DataError(f"no bundles under {args.data}")

    def body(stage: Path):
        kept, discarded = [], {}
        for path in bundles:
            b = read_bundle(path)
            ts = b.tracks
            dest = stage / path.name
            if b.meta.get("space", "normalized") == "pixel":
                n_bg = int(b.meta["n_background"])
                bg = np.fromfile(path / "background.f32", dtype="<f4").astype(np.float64)
                bg_vis = np.fromfile(path / "background_vis.u8", dtype=np.uint8)
                bg = bg.reshape(n_bg, ts.horizon, 2)
                bg_vis = bg_vis.reshape(n_bg, ts.horizon)
                hs = estimate_stabilization(bg, bg_vis, seed=seed)
                if not hs.valid:
                    discarded[path.name] = hs.reason
                    continue
                stab, ok = stabilize_tracks(ts.positions, hs, anchor)
                vis = ts.visibility * ok
                norm = normalize_to_bbox(stab, b.meta["bbox"], margin)
                ts = TrackSet(norm, vis, ts.t_cond, ts.n_valid, ts.fps)
                extra = {"space": "normalized", "stabilized": True,
                         "inlier_ratio": float(hs.inlier_ratios.mean()), "bbox": b.meta["bbox"]}
            else:
                extra = {"space": "normalized", "stabilized": False}
            write_bundle(dest, ts, b.features, {**b.meta.get("provenance", {}), "source": path.name},
                         b.meta["scales"]["v"], b.meta["scales"]["o"], extra)
            if (path / "truth.json").exists():
                shutil.copyfile(path / "truth.json", dest / "truth.json")
            kept.append(path.name)
        write_manifest(stage, "pipeline", {"seed": seed, "anchor_frame": anchor, "margin": margin}, seed,
                       {"kept": kept, "discarded": discarded})
        log.info("kept %d clips, discarded %d", len(kept), len(discarded))
    _staged(args, body)
    return EXIT_OK


def _net_and_train_configs(cfg: dict, seed):
    from .net import NetConfig
    from .trainer import TrainConfig

    net = _strict(NetConfig, cfg.get("net", {}), "net config")
    tr = dict(cfg.get("train", {}))
    if seed is not None:
        tr["seed"] = seed
    return net, _strict(TrainConfig, tr, "train config")


def cmd_train(args) -> int:
    from .net import Checkpoint, save_checkpoint
    from .trainer import build_examples, load_bundle_items, train

    cfg = load_config(args.config, {"net", "train", "max_steps"})
    net, tcfg = _net_and_train_configs(cfg, args.seed)
    examples = build_examples(load_bundle_items(args.data), net, tcfg.max_tracks, tcfg.window_stride)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(examples, net, tcfg, out, resume=args.resume, max_steps=cfg.get("max_steps"),
                   log=log.info)
    step = result.losses[-1]["step"] if result.losses else 0
    final = Checkpoint(net, result.params, result.ema, None, None, step, {"train_config": tcfg.to_dict()})
    save_checkpoint(out / "final.bin", final)
    write_manifest(out, "train", {"net": net.to_dict(), "train": tcfg.to_dict(),
                                  "max_steps": cfg.get("max_steps")}, tcfg.seed,
                   {"n_examples": len(examples)})
    return EXIT_OK


def _load_model(path):
    import numpy as np

    from .net import load_checkpoint
    ck = load_checkpoint(path)
    if ck.ema is None:
        raise DataError(f"{path} holds no EMA weights")
    return ck.config, ck.ema.astype(np.float32)


def _eval_items(data):
    from .trackcore import list_bundles, read_bundle
    items = []
    for path in list_bundles(data):
        b = read_bundle(path)
        if b.meta.get("space", "normalized") != "normalized":
            raise DataError(f"{path}: pixel-space bundle; run the pipeline first")
        if b.features is None:
            raise DataError(f"{path}: bundle has no features")
        items.append((b.tracks, b.features, path.name))
    if not items:
        raise DataError(f"no bundles under {data}")
    return items


def cmd_sample(args) -> int:
    import numpy as np

    from .diffusion import DDIMParams
    from .eval import eval_examples, sample_model
    from .trackcore import displacement_conditioning, write_bundle

    config, params = _load_model(args.checkpoint)
    examples = eval_examples(_eval_items(args.data), config.horizon, config.t_cond)
    if args.clip:
        examples = [e for e in examples if e.name == args.clip]
        if not examples:
            raise DataError(f"clip {args.clip!r} not found")
    ddim = DDIMParams(args.steps, args.eta)
    seed = args.seed if args.seed is not None else 0
    disp = _parse_pair(args.cond_displacement)
    if disp == "gt":
        prompt = displacement_conditioning
    elif disp is not None:
        prompt = lambda _gt: np.asarray(disp)  # noqa: E731
    else:
        prompt = None

    def body(stage: Path):
        for j in range(args.num_samples):
            # sample j is drawn with seed s + j, independent of how many samples are requested
            draws = sample_model(params, config, examples, 1, seed + j, ddim, not args.no_history, prompt)
            for ex, ts in zip(examples, draws):
                write_bundle(stage / ex.name / f"sample_{seed + j}", ts[0], ex.features,
                             {"checkpoint": str(args.checkpoint), "seed": seed + j, "source": ex.name},
                             config.scale_v, config.scale_o, {"space": "normalized"})
        write_manifest(stage, "sample", {"steps": args.steps, "eta": args.eta, "num_samples": args.num_samples,
                                         "cond_displacement": args.cond_displacement,
                                         "history": not args.no_history}, seed)
    _staged(args, body)
    return EXIT_OK


METHODS = ("no-motion", "const-vel", "oracle-vel", "model-uncond", "model-cond")


def cmd_eval(args) -> int:
    from .diffusion import DDIMParams
    from .eval import EvalConfig, baseline_predictor, eval_examples, evaluate, model_predictor, write_report

    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
    needs_model = any(m.startswith("model") for m in methods)
    if needs_model and not args.checkpoint:
        raise ConfigError("model methods need --checkpoint")
    ecfg = EvalConfig(k=args.num_samples)
    if needs_model:
        config, params = _load_model(args.checkpoint)
        horizon, t_cond = config.horizon, config.t_cond
    else:
        horizon, t_cond = args.horizon, args.t_cond
    examples = eval_examples(_eval_items(args.data), horizon, t_cond, ecfg.bucket_edges)
    if not examples:
        raise DataError(f"no clip is at least {horizon} frames long")
    seed = args.seed if args.seed is not None else 0
    reports = []
    for m in methods:
        if m.startswith("model"):
            pred = model_predictor(params, config, ecfg.k, seed, DDIMParams(args.steps, args.eta),
                                   conditioned=(m == "model-cond"))
        else:
            pred = baseline_predictor(m)
        reports.append(evaluate(m, pred, examples, ecfg))
        log.info("evaluated %s", m)

    def body(stage: Path):
        write_report(stage, reports)
        write_manifest(stage, "eval", {"methods": methods, "k": ecfg.k, "steps": args.steps, "eta": args.eta,
                                       "checkpoint": str(args.checkpoint) if args.checkpoint else None}, seed)
    _staged(args, body)
    return EXIT_OK


def cmd_stats(args) -> int:
    from .pipeline import motion_statistics, write_stats
    from .trackcore import list_bundles, read_bundle

    cfg = load_config(args.config, {"bins", "min_clips"})
    bins = int(cfg.get("bins", args.bins))
    min_clips = int(cfg.get("min_clips", args.min_clips))
    tracks = [read_bundle(p).tracks for p in list_bundles(args.data)]
    try:
        stats = motion_statistics(tracks, bins, min_clips)
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    def body(stage: Path):
        write_stats(stage, stats)
        summary = {"lognormal": stats.lognormal.params, "lognormal_r2": stats.lognormal.r2,
                   "powerlaw": stats.powerlaw.params, "powerlaw_r2": stats.powerlaw.r2,
                   "n_clips": int(stats.displacements.size), "n_zero": stats.n_zero}
        (stage / "fits.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        write_manifest(stage, "stats", {"bins": bins, "min_clips": min_clips}, None)
    _staged(args, body)
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (unknown keys are rejected)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="trajdiff", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--clips", type=int)
    g.add_argument("--buckets-only", help="comma-separated motion buckets to generate")
    g.add_argument("--camera", action="store_true", help="film clips with a moving camera (pixel bundles)")
    g.add_argument("--force", action="store_true")

    pl = sub.add_parser("pipeline", parents=[common], help="stabilize and normalize bundles")
    pl.add_argument("--data", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--force", action="store_true")

    t = sub.add_parser("train", parents=[common], help="train the denoiser")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to resume from")

    s = sub.add_parser("sample", parents=[common], help="sample forecasts")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--clip", help="only sample this clip")
    s.add_argument("--num-samples", type=int, default=1)
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--eta", type=float, default=0.0)
    s.add_argument("--cond-displacement", help="'dx,dy' prompt, or 'gt' for the true displacement")
    s.add_argument("--no-history", action="store_true")
    s.add_argument("--force", action="store_true")

    e = sub.add_parser("eval", parents=[common], help="evaluate methods and write reports")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--methods", default=",".join(METHODS))
    e.add_argument("--num-samples", type=int, default=5)
    e.add_argument("--steps", type=int, default=100)
    e.add_argument("--eta", type=float, default=0.0)
    e.add_argument("--horizon", type=int, default=32, help="window length for baseline-only runs")
    e.add_argument("--t-cond", type=int, default=4)
    e.add_argument("--force", action="store_true")

    st = sub.add_parser("stats", parents=[common], help="displacement statistics and fits")
    st.add_argument("--data", required=True)
    st.add_argument("--out", required=True)
    st.add_argument("--bins", type=int, default=30)
    st.add_argument("--min-clips", type=int, default=100)
    st.add_argument("--force", action="store_true")
    return p


COMMANDS = {"gen": cmd_gen, "pipeline": cmd_pipeline, "train": cmd_train, "sample": cmd_sample,
            "eval": cmd_eval, "stats": cmd_stats}


def _error(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")

    from .net import CheckpointError, NumericError
    from .pipeline import PipelineError
    from .trackcore import TrackError

    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        return _error("config", exc, EXIT_CONFIG)
    except (DataError, TrackError, PipelineError, CheckpointError, FileNotFoundError) as exc:
        return _error("data", exc, EXIT_DATA)
    except (NumericError, FloatingPointError) as exc:
        return _error("numeric", exc, EXIT_NUMERIC)


if __name__ == "__main__":
    sys.exit(main())
