"""Command-line entry point: ``fsnerf <subcommand>``.

Settings come from built-in defaults, then an optional INI config file
(``--config``), then command-line flags; later sources win.  Exit codes:
0 success, 1 usage or configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, DepthSaliency, WarpPolicy, hole_stats, load_pseudo_views, save_pseudo_views
from .dataio import (
    LoadError,
    MetricError,
    evaluate_images,
    generate_toy_scene,
    load_scene,
    save_scene,
    write_depth,
    write_image,
)
from .field import CheckpointError, ContractError, FieldError, load_checkpoint
from .geometry import GeometryError, Pose, spherical_pose
from .renderer import RenderError, RenderOptions, render_image
from .trainer import Probe, TrainConfig, Trainer, TrainingError, build_pseudo_views

log = logging.getLogger("fsnerf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "FSNERF_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# settings ------------------------------------------------------------------------

AUGMENT_KEYS = {
    "alpha": (float, "grid half-range in degrees"),
    "step": (float, "grid step in degrees"),
    "pivot": (str, "rotation pivot: 'camera' (about the camera centre) or 'scene' (orbit about the origin)"),
    "fill_depth": (str, "depth given to pixels without depth: 'none', 'far' or a number"),
    "band": (float, "relative depth band for blending splats"),
    "w_min": (float, "minimum splat weight for a valid pixel"),
    "min_splat_weight": (float, "bilinear coefficients below this are dropped"),
    "conflict": (str, "depth conflict rule: 'coverage' or 'nearest'"),
    "saliency_rule": (str, "saliency from depth: 'finite', 'percentile' or 'distance'"),
    "saliency_value": (float, "threshold for the percentile/distance saliency rules"),
}
AUGMENT_DEFAULTS = {"alpha": 30.0, "step": 5.0, "pivot": "camera", "fill_depth": "none", "band": 0.01,
                    "w_min": 0.25, "min_splat_weight": 0.05, "conflict": "coverage", "saliency_rule": "finite",
                    "saliency_value": None}

_TRAIN_HELP = {
    "init_iterations": "iterations of the initialisation stage",
    "finetune_iterations": "iterations of the fine-tuning stage",
    "rays_per_batch": "rays per optimisation step",
    "learning_rate": "initial Adam step size",
    "lr_final_factor": "step size at the end of each stage, relative to the initial one",
    "lambda_msc": "weight of the multi-level semantic consistency term",
    "lambda_ip": "weight of the information potential term",
    "bg_weight": "weight of the background photometric term",
    "seed": "random seed",
    "n_samples": "samples per ray",
    "msc_interval": "evaluate MSC every this many fine-tune iterations",
    "msc_resolution": "long side of the reduced render used for MSC",
    "ip_rays": "rays for IP: 'batch' or 'unseen'",
    "pseudo_fraction": "fixed share of pseudo-view rays during init (default: uniform over pixels)",
    "depth": "trunk layers",
    "width": "trunk width",
    "skip": "trunk layer receiving the encoding again (none to disable)",
    "position_frequencies": "positional encoding frequencies",
    "direction_frequencies": "direction encoding frequencies",
    "checkpoint_interval": "iterations between checkpoints",
    "eval_interval": "iterations between probe evaluations",
    "log_interval": "iterations between metric rows",
}
TRAIN_KEYS = {f.name: _TRAIN_HELP[f.name] for f in fields(TrainConfig)}


def _flag(key):
    return "--" + key.replace("_", "-")


def _optional(conv):
    def parse(text):
        if str(text).strip().lower() in ("none", ""):
            return None
        return conv(text)
    return parse


def _train_types():
    types = {}
    for f in fields(TrainConfig):
        t = str(f.type)
        if "int" in t:
            conv = int
        elif "float" in t:
            conv = float
        else:
            conv = str
        types[f.name] = _optional(conv) if "None" in t else conv
    return types


TRAIN_TYPES = _train_types()


def read_config(path) -> dict:
    """Flat ``key = value`` pairs from sections ``[train]`` and ``[augment]``."""
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    out = {"train": {}, "augment": {}}
    for section in cp.sections():
        if section not in out:
            raise UsageError(f"{path}: unknown section [{section}] (expected [train] or [augment])")
        known = TRAIN_TYPES if section == "train" else AUGMENT_KEYS
        for key, value in cp.items(section):
            if key not in known:
                raise UsageError(f"{path}: unknown key '{key}' in [{section}]")
            conv = known[key] if section == "train" else _optional(AUGMENT_KEYS[key][0])
            try:
                out[section][key] = conv(value)
            except ValueError as exc:
                raise UsageError(f"{path}: bad value for {key}: {value!r}") from exc
    return out


def _merge(defaults: dict, file_values: dict, args, keys) -> dict:
    merged = dict(defaults)
    merged.update(file_values)
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def resolve_train_config(args, file_cfg) -> TrainConfig:
    merged = _merge({}, file_cfg.get("train", {}), args, TRAIN_KEYS)
    try:
        return TrainConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from exc


def resolve_augment_config(args, file_cfg, far: float | None) -> tuple:
    s = _merge(AUGMENT_DEFAULTS, file_cfg.get("augment", {}), args, AUGMENT_KEYS)
    if s["pivot"] not in ("camera", "scene"):
        raise UsageError(f"pivot must be 'camera' or 'scene', got {s['pivot']!r}")
    fill = str(s["fill_depth"]).lower()
    if fill == "none":
        fill_depth = None
    elif fill == "far":
        fill_depth = far
    else:
        try:
            fill_depth = float(fill)
        except ValueError:
            raise UsageError(f"fill_depth must be 'none', 'far' or a number, got {s['fill_depth']!r}") from None
    try:
        policy = WarpPolicy(s["band"], s["w_min"], s["min_splat_weight"], s["conflict"])
        aug = AugmentConfig(s["alpha"], s["step"], (0.0, 0.0, 0.0) if s["pivot"] == "scene" else None,
                            fill_depth, policy)
        saliency = DepthSaliency(s["saliency_rule"], s["saliency_value"])
        if s["saliency_rule"] not in ("finite", "percentile", "distance"):
            raise ValueError(f"unknown saliency rule {s['saliency_rule']!r}")
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return aug, saliency, s


# plots -------------------------------------------------------------------------------


def svg_plot(series: dict, title: str, xlabel: str, ylabel: str, kind: str = "line", labels=None) -> str:
    """Self-contained SVG line or bar chart.

    ``series`` maps a name to (xs, ys).  Every data point is drawn as a mark
    carrying its value in ``data-x``/``data-y`` attributes.
    """
    w, h, pad = 640, 400, 56
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys) if math.isfinite(y)]
    if pts:
        x_lo, x_hi = min(p[0] for p in pts), max(p[0] for p in pts)
        y_lo, y_hi = min(p[1] for p in pts), max(p[1] for p in pts)
    else:
        x_lo, x_hi, y_lo, y_hi = 0.0, 1.0, 0.0, 1.0
    if kind == "bar":
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
        y_lo = min(y_lo, 0.0)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0

    def sx(x):
        return pad + (x - x_lo) / (x_hi - x_lo) * (w - 2 * pad)

    def sy(y):
        return h - pad - (y - y_lo) / (y_hi - y_lo) * (h - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{w / 2}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{_esc(title)}</text>',
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
        f'<text x="{w / 2}" y="{h - 14}" text-anchor="middle" font-family="sans-serif" font-size="12">{_esc(xlabel)}</text>',
        f'<text x="16" y="{h / 2}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 16 {h / 2})">{_esc(ylabel)}</text>',
        f'<text x="{pad - 4}" y="{h - pad}" text-anchor="end" font-family="sans-serif" font-size="10">{y_lo:.4g}</text>',
        f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end" font-family="sans-serif" font-size="10">{y_hi:.4g}</text>',
    ]
    for ci, (name, (xs, ys)) in enumerate(series.items()):
        color = colors[ci % len(colors)]
        finite = [(x, y) for x, y in zip(xs, ys) if math.isfinite(y)]
        if kind == "line" and len(finite) > 1:
            path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in finite)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        for i, (x, y) in enumerate(zip(xs, ys)):
            label = labels[i] if labels is not None and i < len(labels) else x
            shown = y if math.isfinite(y) else y_hi
            tag = f'data-series="{_esc(name)}" data-x="{_esc(str(label))}" data-y="{y!r}"'
            if kind == "bar":
                bw = 0.6 * (w - 2 * pad) / max(len(xs), 1) / max(len(series), 1)
                x0 = sx(x) - bw * len(series) / 2 + ci * bw
                top = sy(shown)
                out.append(f'<rect x="{x0:.2f}" y="{top:.2f}" width="{bw:.2f}" height="{sy(y_lo) - top:.2f}" '
                           f'fill="{color}" {tag}><title>{_esc(str(label))}: {y:.4g}</title></rect>')
            else:
                out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(shown):.2f}" r="2.5" fill="{color}" {tag}>'
                           f'<title>{_esc(str(label))}: {y:.4g}</title></circle>')
        out.append(f'<text x="{w - pad}" y="{pad + 14 * ci}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="11" fill="{color}">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


# subcommands -------------------------------------------------------------------


def cmd_toy(args, file_cfg) -> int:
    rng = np.random.default_rng(args.seed) if args.random_poses else None
    n_train = args.views
    n_total = n_train + args.test_views
    if args.random_poses:
        scene = generate_toy_scene(n_views=n_total, resolution=args.resolution, rng=rng,
                                   splits=["train"] * n_train + ["test"] * args.test_views)
    else:
        # training views evenly spaced in azimuth; test views halfway between them and lower
        poses = [spherical_pose(360.0 * i / n_train, 37.5, 4.0) for i in range(n_train)]
        poses += [spherical_pose(360.0 * (i + 0.5) / max(args.test_views, 1), 25.0, 4.0) for i in range(args.test_views)]
        scene = generate_toy_scene(resolution=args.resolution, poses=poses,
                                   splits=["train"] * n_train + ["test"] * args.test_views)
    path = save_scene(scene, args.out)
    print(f"wrote {len(scene.frames)} frames to {path}")
    return EXIT_OK


def cmd_augment(args, file_cfg) -> int:
    scene = load_scene(args.scene)
    aug, saliency, settings = resolve_augment_config(args, file_cfg, scene.far)
    frames = scene.split("train")
    if not frames:
        raise LoadError(f"{args.scene}: no training frames")
    views = build_pseudo_views(scene, frames, aug, saliency)
    save_pseudo_views(views, args.out)
    stats = hole_stats(views)
    for i, v in enumerate(views):
        print(f"{i:05d} source={v.source_id} angles={v.angles} hole_fraction={v.hole_fraction:.4f}")
    print(f"views={stats['count']} mean_hole_fraction={stats['mean_hole_fraction']:.6f} "
          f"max_hole_fraction={stats['max_hole_fraction']:.6f}")
    return EXIT_OK


def cmd_train(args, file_cfg) -> int:
    scene = load_scene(args.scene)
    cfg = resolve_train_config(args, file_cfg)
    aug, saliency, _ = resolve_augment_config(args, file_cfg, scene.far)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = scene.split("train")
    if not frames:
        raise LoadError(f"{args.scene}: no training frames")
    if args.pseudo:
        pseudo = load_pseudo_views(args.pseudo)
    elif args.augment_inline:
        pseudo = build_pseudo_views(scene, frames, aug, saliency)
    elif cfg.init_iterations > 0 and not args.no_pseudo:
        raise UsageError("training needs --pseudo DIR, --augment-inline or --no-pseudo")
    else:
        pseudo = []
    probes = [Probe(f.name, f.image, f.pose) for f in scene.split(args.probe_split)]
    trainer = Trainer(scene, cfg, frames, pseudo, probes, out_dir=out, augment_cfg=aug)
    if args.resume:
        trainer.restore(args.resume)
        print(f"resumed from {args.resume} at iteration {trainer.iteration}")
    (out / "config.json").write_text(json.dumps({"train": cfg.__dict__, "n_pseudo_views": len(pseudo)},
                                                indent=1, sort_keys=True, default=str))
    t0 = time.perf_counter()
    trainer.run(until=args.until)
    elapsed = time.perf_counter() - t0
    with open(out / "timing.csv", "a") as fh:
        fh.write(f"{trainer.iteration},{elapsed:.3f}\n")
    last = trainer.history[-1] if trainer.history else None
    if last is not None:
        print(f"iteration {trainer.iteration} stage {last.stage} total {last.breakdown.total:.6g} "
              f"({elapsed:.1f} s)")
    else:
        print(f"iteration {trainer.iteration}: nothing to train; initial checkpoint written")
    return EXIT_OK


def _load_poses(path) -> list:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"{path}: cannot read poses: {exc}") from exc
    mats = data["frames"] if isinstance(data, dict) else data
    return [Pose.from_matrix(m["transform_matrix"] if isinstance(m, dict) else m) for m in mats]


def cmd_render(args, file_cfg) -> int:
    params, _, meta = load_checkpoint(args.checkpoint, dtype=np.float64 if args.float64 else np.float32)
    scene = load_scene(args.scene)
    poses = _load_poses(args.poses) if args.poses else [f.pose for f in scene.split(args.split)]
    if not poses:
        raise LoadError(f"no poses to render (split '{args.split}' is empty)")
    n_samples = args.n_samples or meta.get("config", {}).get("n_samples", 64)
    opts = RenderOptions(scene.near, scene.far, n_samples, tuple(scene.background))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, pose in enumerate(poses):
        rgb, depth, acc = render_image(params, scene.camera, pose, opts)
        write_image(out / f"{i:03d}_rgb.png", rgb)
        write_depth(out / f"{i:03d}_depth.pfm", depth)
        write_image(out / f"{i:03d}_acc.png", np.repeat(acc[..., None], 3, axis=-1))
    print(f"rendered {len(poses)} views to {out}")
    return EXIT_OK


def cmd_eval(args, file_cfg) -> int:
    scene = load_scene(args.scene)
    frames = scene.split(args.split)
    if not frames:
        raise MetricError(f"split '{args.split}' is empty")
    if args.checkpoint:
        params, _, meta = load_checkpoint(args.checkpoint)
        n_samples = args.n_samples or meta.get("config", {}).get("n_samples", 64)
        opts = RenderOptions(scene.near, scene.far, n_samples, tuple(scene.background))
        rendered = [render_image(params, scene.camera, f.pose, opts)[0] for f in frames]
    else:
        # no checkpoint: compare the references with themselves (sanity check of the metric path)
        rendered = [f.image for f in frames]
    names = [f.name or f"view_{i:03d}" for i, f in enumerate(frames)]
    report = evaluate_images(names, rendered, [f.image for f in frames], {"split": args.split})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv())
    for n, p, s in zip(report.names, report.psnr, report.ssim):
        print(f"{n} psnr={'inf' if math.isinf(p) else f'{p:.3f}'} ssim={s:.4f}")
    print(f"mean psnr={report.mean_psnr:.3f} ssim={report.mean_ssim:.4f}")
    if args.plots:
        xs = list(range(len(names)))
        (out / "views_psnr.svg").write_text(svg_plot({"psnr": (xs, report.psnr)}, "PSNR per view", "view", "PSNR (dB)",
                                                     kind="bar", labels=names))
        (out / "views_ssim.svg").write_text(svg_plot({"ssim": (xs, report.ssim)}, "SSIM per view", "view", "SSIM",
                                                     kind="bar", labels=names))
        if args.training_log:
            write_training_plots(args.training_log, out)
    return EXIT_OK


def write_training_plots(metrics_csv, out_dir) -> list:
    """Loss terms and probe PSNR against iteration from a training metrics log."""
    try:
        with open(metrics_csv, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise LoadError(f"{metrics_csv}: {exc}") from exc
    out_dir = Path(out_dir)
    written = []
    it = [int(r["iteration"]) for r in rows]
    losses = {k: (it, [float(r[k]) for r in rows]) for k in ("total", "photometric", "msc", "ip")}
    path = out_dir / "training_losses.svg"
    path.write_text(svg_plot(losses, "Training losses", "iteration", "loss"))
    written.append(path)
    probe = [(int(r["iteration"]), float(r["probe_psnr"])) for r in rows if r.get("probe_psnr")]
    if probe:
        path = out_dir / "training_probe_psnr.svg"
        path.write_text(svg_plot({"probe psnr": ([p[0] for p in probe], [p[1] for p in probe])},
                                 "Probe PSNR", "iteration", "PSNR (dB)"))
        written.append(path)
    return written


# parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fsnerf", description="Few-shot radiance field training with pseudo-view augmentation.")
    p.add_argument("--config", help="INI file with [train] and [augment] sections; flags override it")
    p.add_argument("--threads", type=int, default=None,
                   help=f"BLAS/OpenMP thread limit (default: ${THREADS_ENV}, else unlimited)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("toy", help="generate the analytic sphere+box scene")
    t.add_argument("--out", required=True)
    t.add_argument("--views", type=int, default=3, help="training views")
    t.add_argument("--test-views", type=int, default=1)
    t.add_argument("--resolution", type=int, default=32)
    t.add_argument("--random-poses", action="store_true")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_toy)

    a = sub.add_parser("augment", help="generate the pseudo-view cache")
    a.add_argument("--scene", required=True)
    a.add_argument("--out", required=True)
    _add_augment_flags(a)
    a.set_defaults(func=cmd_augment)

    tr = sub.add_parser("train", help="run both training stages")
    tr.add_argument("--scene", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--pseudo", help="pseudo-view cache written by 'augment'")
    tr.add_argument("--augment-inline", action="store_true", help="generate pseudo-views in memory")
    tr.add_argument("--no-pseudo", action="store_true", help="train on the real views only")
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.add_argument("--until", type=int, help="stop after this global iteration")
    tr.add_argument("--probe-split", default="test")
    _add_augment_flags(tr)
    g = tr.add_argument_group("training (config section [train])")
    for key, help_text in TRAIN_KEYS.items():
        g.add_argument(_flag(key), dest=key, type=TRAIN_TYPES[key], default=None, help=f"{help_text} [{key}]")
    # short aliases
    g.add_argument("--init-iters", dest="init_iterations", type=int, default=None, help=argparse.SUPPRESS)
    g.add_argument("--finetune-iters", dest="finetune_iterations", type=int, default=None, help=argparse.SUPPRESS)
    tr.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render images, depth and accumulation from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--scene", required=True, help="scene giving the camera and near/far")
    r.add_argument("--poses", help="JSON list of 4x4 camera-to-world matrices (default: frames of --split)")
    r.add_argument("--split", default="test")
    r.add_argument("--out", required=True)
    r.add_argument("--n-samples", type=int)
    r.add_argument("--float64", action="store_true", help="render in double precision")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a split, with optional SVG plots")
    e.add_argument("--scene", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--n-samples", type=int)
    e.add_argument("--plots", action="store_true")
    e.add_argument("--training-log", help="metrics.csv from 'train' to plot against iteration")
    e.set_defaults(func=cmd_eval)
    return p


def _add_augment_flags(parser):
    g = parser.add_argument_group("augmentation (config section [augment])")
    for key, (conv, help_text) in AUGMENT_KEYS.items():
        g.add_argument(_flag(key), dest=key, type=conv, default=None,
                       help=f"{help_text} [{key}, default {AUGMENT_DEFAULTS[key]}]")


def _thread_count(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        file_cfg = read_config(args.config) if args.config else {}
        threads = _thread_count(args)
        if threads is not None and threads < 1:
            raise UsageError("thread count must be at least 1")
        if threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=threads):
                return args.func(args, file_cfg)
        return args.func(args, file_cfg)
    except UsageError as exc:
        print(f"fsnerf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LoadError, CheckpointError, MetricError, ContractError, GeometryError, FileNotFoundError,
            KeyError) as exc:
        print(f"fsnerf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, RenderError, FieldError, FloatingPointError) as exc:
        print(f"fsnerf: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
