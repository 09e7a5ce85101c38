"""Command-line entry point: ``burstfeat <command> [options]``.

Every command reads an optional YAML config (``--config`` or the
``BURSTFEAT_CONFIG`` environment variable); command-line flags win over it.
Exit codes: 0 ok, 2 bad arguments, 3 data error, 4 numeric failure.  On
failure a single line ``burstfeat-error code=<n> kind=<Type> msg=<json string>``
goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import evalharness, interop
from .burstsynth import BurstSpec, make_burst_pair
from .extractor import ExtractParams, extract_features, fit_burst_to_model, build_scale_pyramid
from .losses import LossConfig
from .network import ModelConfig, forward, load_checkpoint
from .trainer import EmptyCorpusError, NonFiniteLossError, TrainConfig, ingest_corpus, load_corpus_images, train

log = logging.getLogger("burstfeat")

CONFIG_ENV = "BURSTFEAT_CONFIG"
EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(ValueError):
    pass


# -- config ------------------------------------------------------------------

def load_config(path: str | None) -> dict:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, dict):
        raise UsageError(f"config {p} must hold a mapping at top level")
    return data


def _pick(flag, cfg: dict, key: str, default):
    if flag is not None:
        return flag
    return cfg.get(key, default)


def burst_spec_from(cfg: dict, args) -> BurstSpec:
    b = dict(cfg.get("burst", {}))
    lo, hi = b.pop("noise_variance_range", BurstSpec.noise_variance_range)
    lo = _pick(getattr(args, "noise_min", None), {}, "", lo)
    hi = _pick(getattr(args, "noise_max", None), {}, "", hi)
    b["noise_variance_range"] = (lo, hi)
    if getattr(args, "frames", None) is not None:
        b["frame_count"] = args.frames
    if getattr(args, "max_translation", None) is not None:
        b["max_translation"] = args.max_translation
    if "crop_size" in cfg and "crop_size" not in b:
        b["crop_size"] = cfg["crop_size"]
    return BurstSpec(**b)


def train_config_from(cfg: dict, args) -> TrainConfig:
    spec = burst_spec_from(cfg, args)
    model = dict(cfg.get("model", {}))
    model.setdefault("frame_count", spec.frame_count)
    for k in ("backbone_widths", "dilation_schedule"):
        if k in model:
            model[k] = tuple(model[k])
    corpus = args.corpus if args.corpus else cfg.get("corpus_dirs", [])
    if not corpus:
        raise UsageError("no corpus directories given (--corpus or corpus_dirs in the config)")
    return TrainConfig(
        epochs=_pick(args.epochs, cfg, "epochs", 25),
        learning_rate=_pick(args.lr, cfg, "learning_rate", 1e-4),
        weight_decay=_pick(args.wd, cfg, "weight_decay", 5e-4),
        batch_size=_pick(args.batch, cfg, "batch_size", 4),
        crop_size=_pick(args.crop, cfg, "crop_size", 192),
        burst_spec=spec,
        loss_config=LossConfig(**cfg.get("loss", {})),
        model_config=ModelConfig(**model),
        corpus_dirs=[str(c) for c in corpus],
        checkpoint_dir=str(_pick(args.out, cfg, "checkpoint_dir", "checkpoints")),
        seed=_pick(args.seed, cfg, "seed", 0),
    )


def extract_params_from(cfg: dict, args) -> ExtractParams:
    e = dict(cfg.get("extract", {}))
    if args.max_kpts is not None:
        e["max_keypoints"] = args.max_kpts
    if args.det_thr is not None:
        e["detection_threshold"] = args.det_thr
    if args.rel_thr is not None:
        e["reliability_threshold"] = args.rel_thr
    if args.scales is not None:
        e["multiscale"] = args.scales == "on"
    return ExtractParams(**e)


# -- commands ----------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    spec = burst_spec_from(cfg, args)
    if args.crop is not None:
        spec.crop_size = args.crop
    corpus = args.corpus or cfg.get("corpus_dirs", [])
    if not corpus:
        raise UsageError("no corpus directories given (--corpus or corpus_dirs in the config)")
    manifest = ingest_corpus(corpus, spec.crop_size)
    images = load_corpus_images(manifest, spec, args.channels)
    seed = _pick(args.seed, cfg, "seed", 0)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dirs = []
    for i in range(args.count):
        pair = make_burst_pair(images[i % len(images)], spec, np.random.default_rng([seed, i]))
        d = out / f"pair_{i:04d}"
        interop.write_burst_dir(d / "a", pair.burst_a)
        interop.write_burst_dir(d / "b", pair.burst_b)
        interop.write_flow_file(d / "flow_ab.lbfw", pair.flow_ab)
        np.savetxt(d / "homography_ab.txt", pair.homography_ab, fmt="%.17g")
        dirs.extend([d / "a", d / "b"])
    interop.write_manifest(out / "manifest.txt", [p.relative_to(out) for p in dirs])
    print(f"wrote {args.count} burst pairs to {out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    config = train_config_from(cfg, args)
    result = train(config, resume_from=args.resume)
    for i, v in enumerate(result.epoch_losses, 1):
        print(f"epoch {i} loss {v:.6f}")
    print(f"final checkpoint {result.checkpoints[-1] if result.checkpoints else 'none'}")
    return EXIT_OK


def _burst_dirs(src: Path) -> list[Path]:
    if src.is_dir():
        return [src]
    if src.is_file():
        return interop.read_manifest(src)
    raise FileNotFoundError(f"input not found: {src}")


def _model_extractor(model, params: ExtractParams):
    cfg = model.config

    def run(burst, image_id):
        b = fit_burst_to_model(burst, cfg.frame_count, cfg.input_channels)
        return extract_features(model, b, params, image_id=image_id)
    return run


def dump_maps(model, burst, params: ExtractParams, out_stem: Path) -> None:
    """Write the level-0 detection and reliability maps as 8-bit PNGs."""
    _, level = build_scale_pyramid(burst, params)[0]
    out = forward(model, level)
    interop.write_image_png(out_stem.with_name(out_stem.name + "_K.png"), out.detection)
    interop.write_image_png(out_stem.with_name(out_stem.name + "_R.png"), out.reliability)


def cmd_extract(args, cfg) -> int:
    params = extract_params_from(cfg, args)
    model, _, _ = load_checkpoint(args.weights)
    model.eval()
    run = _model_extractor(model, params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    empty = 0
    dirs = _burst_dirs(Path(args.input))
    for d in dirs:
        burst = interop.read_burst_dir(d)
        name = d.name if len(dirs) == 1 or d.parent.name == "" else f"{d.parent.name}_{d.name}"
        fs = run(burst, name)
        if fs.empty:
            empty += 1
        interop.write_feature_file(out / f"{name}.lbft", fs)
        if args.dump_maps:
            b = fit_burst_to_model(burst, model.config.frame_count, model.config.input_channels)
            dump_maps(model, b, params, out / name)
    if empty:
        log.warning("%d of %d bursts produced no keypoints", empty, len(dirs))
    print(f"extracted {len(dirs)} bursts, {empty} empty")
    return EXIT_OK


def cmd_eval_matching(args, cfg) -> int:
    model, _, _ = load_checkpoint(args.weights)
    model.eval()
    e = dict(cfg.get("extract", {}))
    params = ExtractParams(**e)
    spec = burst_spec_from(cfg, args)
    seed = _pick(args.seed, cfg, "seed", 0)
    report = evalharness.hpatches_burst_benchmark(
        args.dataset, _model_extractor(model, params), noise_levels=tuple(args.noise), spec=spec, seed=seed,
        channels=model.config.input_channels, max_dim=args.max_dim)
    report.write(args.out)
    print("subset\tnoise\tMMA@3\tpairs")
    for s in report.summary:
        print(f"{s['subset']}\t{s['noise']:g}\t{s['mma@3']:.4f}\t{s.get('pairs', '')}")
    return EXIT_OK


def cmd_eval_pose(args, cfg) -> int:
    est = evalharness.read_poses(args.est)
    gt = evalharness.read_poses(args.gt)
    err = evalharness.ate_rpe(est, gt, align=not args.no_align)
    print("ATE_trans\tATE_rot_deg\tRPE_trans\tRPE_rot_deg")
    print(f"{err.ate_trans:.6f}\t{err.ate_rot_deg:.6f}\t{err.rpe_trans:.6f}\t{err.rpe_rot_deg:.6f}")
    return EXIT_OK


def cmd_export_colmap(args, cfg) -> int:
    src = Path(args.features_dir)
    if not src.is_dir():
        raise FileNotFoundError(f"features directory not found: {src}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = sorted(src.glob("*.lbft"))
    skipped = 0
    for f in files:
        fs = interop.read_feature_file(f)
        if fs.empty:
            skipped += 1
            continue
        interop.export_sfm_text(fs, out / f"{fs.image_id or f.stem}.txt")
    if skipped:
        log.warning("skipped %d empty feature files", skipped)
    print(f"exported {len(files) - skipped} feature files to {out}")
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    stats = []
    for path in args.stats:
        stats.extend(evalharness.grouped_reconstruction_stats(path))
    cols = ["method", "dataset", "convergence_rate", "images_passed_pct", "keypoints_per_image",
            "putative_matches", "inliers", "match_ratio", "match_score", "precision", "points3d_per_image"]
    print("\t".join(cols))
    for s in stats:
        d = s.as_dict()
        print("\t".join(str(d[c]) if isinstance(d[c], str) else f"{d[c]:.3f}" for c in cols))
        if s.flags:
            log.warning("%s/%s flags: %s", s.method, s.dataset, ",".join(s.flags))
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"YAML config file (default: ${CONFIG_ENV})")
    common.add_argument("--seed", type=int, default=None, help="seed for all randomness (config 'seed', else 0)")
    common.add_argument("--jobs", type=int, default=1, help="maximum worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="burstfeat", description="Learned burst features: synthesize, train, "
                                "extract, evaluate.", formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)

    def burst_flags(sp):
        sp.add_argument("--frames", type=int, default=None, help="frames per burst (default 5)")
        sp.add_argument("--max-translation", type=float, default=None,
                        help="bound on the extreme intra-burst shift in px (default 30)")
        sp.add_argument("--noise-min", type=float, default=None, help="lower noise variance (default 0.3)")
        sp.add_argument("--noise-max", type=float, default=None, help="upper noise variance (default 0.6)")

    s = sub.add_parser("synth", parents=[common], formatter_class=fmt, help="generate burst pairs from a corpus")
    s.add_argument("out_dir")
    s.add_argument("--corpus", nargs="+", default=None, help="corpus directories")
    s.add_argument("--count", type=int, default=10, help="number of burst pairs")
    s.add_argument("--crop", type=int, default=None, help="crop size in px (default 192)")
    s.add_argument("--channels", type=int, choices=(1, 3), default=3)
    burst_flags(s)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], formatter_class=fmt, help="train a model")
    t.add_argument("--corpus", nargs="+", default=None, help="corpus directories")
    t.add_argument("--out", default=None, help="checkpoint directory (default ./checkpoints)")
    t.add_argument("--epochs", type=int, default=None, help="epochs (default 25)")
    t.add_argument("--lr", type=float, default=None, help="learning rate (default 1e-4)")
    t.add_argument("--wd", type=float, default=None, help="decoupled weight decay (default 5e-4)")
    t.add_argument("--batch", type=int, default=None, help="burst pairs per step (default 4)")
    t.add_argument("--crop", type=int, default=None, help="training crop size (default 192)")
    t.add_argument("--resume", default=None, help="epoch checkpoint to continue from")
    burst_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", parents=[common], formatter_class=fmt, help="extract features from bursts")
    e.add_argument("weights", help="checkpoint file")
    e.add_argument("input", help="burst directory or manifest file listing burst directories")
    e.add_argument("out", help="output directory for .lbft files")
    e.add_argument("--max-kpts", type=int, default=None, help="keypoint cap (default 4000)")
    e.add_argument("--det-thr", type=float, default=None, help="detection threshold (default 0.7)")
    e.add_argument("--rel-thr", type=float, default=None, help="reliability threshold (default 0.7)")
    e.add_argument("--scales", choices=("on", "off"), default=None,
                   help="multi-scale pyramid 1024 down to 256 in steps of 2^(1/4) (default on)")
    e.add_argument("--dump-maps", action="store_true", help="write detection/reliability maps as PNG")
    e.set_defaults(func=cmd_extract)

    m = sub.add_parser("eval-matching", parents=[common], formatter_class=fmt,
                       help="MMA and repeatability on an HPatches-layout dataset")
    m.add_argument("dataset")
    m.add_argument("weights")
    m.add_argument("--noise", type=float, nargs="+", default=[0.0, 0.3, 0.6], help="noise variances")
    m.add_argument("--out", default="eval_matching", help="output directory")
    m.add_argument("--max-dim", type=int, default=None, help="rescale scene images to this max dim")
    burst_flags(m)
    m.set_defaults(func=cmd_eval_matching)

    q = sub.add_parser("eval-pose", parents=[common], formatter_class=fmt, help="ATE and RPE of a trajectory")
    q.add_argument("est", help="estimated poses")
    q.add_argument("gt", help="ground-truth poses")
    q.add_argument("--no-align", action="store_true", help="skip similarity alignment")
    q.set_defaults(func=cmd_eval_pose)

    x = sub.add_parser("export-colmap", parents=[common], formatter_class=fmt,
                       help="write keypoint text files for SfM import")
    x.add_argument("features_dir")
    x.add_argument("out_dir")
    x.set_defaults(func=cmd_export_colmap)

    r = sub.add_parser("report", parents=[common], formatter_class=fmt, help="reconstruction statistics table")
    r.add_argument("stats", nargs="+", help="tab-separated per-image report files")
    r.set_defaults(func=cmd_report)
    return p


def _classify(exc: BaseException) -> int:
    if isinstance(exc, (NonFiniteLossError, FloatingPointError, np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    if isinstance(exc, (UsageError, TypeError)):
        return EXIT_ARGS
    if isinstance(exc, (EmptyCorpusError, interop.FormatError, OSError, ValueError, KeyError)):
        return EXIT_DATA
    return EXIT_DATA


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.jobs))
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except Exception as exc:  # one parseable line, no traceback
        code = _classify(exc)
        print(f"burstfeat-error code={code} kind={type(exc).__name__} msg={json.dumps(str(exc))}", file=sys.stderr)
        if args.verbose:
            raise
        return code


if __name__ == "__main__":
    sys.exit(main())
