# -*- coding: utf-8 -*-
"""
Command-line entry point: keypatch <command> [options]

Commands: render, generate, train, infer, validate, sweep, check-dataset.
Diagnostics go to standard error; results are written to files only.
"""
import argparse
import glob
import json
import math
import os
import sys

import cv2
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import console  # noqa: E402
from .config import WORKERS_ENV, load_config, worker_count, write_effective_config  # noqa: E402
from .errors import EXIT_DATA, EXIT_OK, ConfigError, KeypatchError, exit_code_for  # noqa: E402
from .evaluation import AXES, AXIS_ALIASES, run_sweep, run_validation  # noqa: E402
from .model import Predictor, default_device, draw_detections, load_checkpoint  # noqa: E402
from .patch_designs import canonical_designs, render_patch, write_designs_json  # noqa: E402


def _prepare_out_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")
    return path


# ============================================================================
# COMMANDS
# ============================================================================

def save_design_sheet(path, radius_px=64, rotations=(0, 45, 90, 180, 270)):
    """Grid of the four designs (rows) at several rotations (columns)"""
    designs = canonical_designs()
    fig, axes = plt.subplots(len(designs), len(rotations), figsize=(2 * len(rotations), 2 * len(designs)))
    for row, spec in enumerate(designs):
        for col, angle in enumerate(rotations):
            ax = axes[row][col]
            raster = render_patch(spec, radius_px, rotation=math.radians(angle))
            ax.imshow(raster.pixels, cmap="gray", vmin=0, vmax=255)
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(f"{angle} deg", fontsize=9)
            if col == 0:
                ax.set_ylabel(f"type {spec.type_id}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def cmd_render(args, cfg):
    out = _prepare_out_dir(args.out)
    console.section("DESIGN PREVIEWS")
    rotation = math.radians(args.rotation)
    rasters = [render_patch(spec, args.radius, rotation=rotation) for spec in canonical_designs()]
    for raster in rasters:
        path = os.path.join(out, f"type_{raster.type_id}.png")
        if not cv2.imwrite(path, raster.pixels):
            raise ConfigError(f"cannot write {path}")
        console.ok(f"type {raster.type_id} -> {path}")
    write_designs_json(os.path.join(out, "designs.json"))
    save_design_sheet(os.path.join(out, "design_sheet.png"), args.radius)
    write_effective_config(cfg, out)
    console.ok(f"designs.json and design_sheet.png written to {out}")
    return EXIT_OK


def cmd_generate(args, cfg):
    from .dataset_synth import TRAIN_STREAM, VALIDATION_STREAM, synthesize_dataset

    if args.count is not None:
        if args.split == "validation":
            cfg.synth.validation_count = args.count
        else:
            cfg.synth.count = args.count
    if args.seed is not None:
        cfg.seed = args.seed
    if args.backgrounds:
        cfg.synth.backgrounds = args.backgrounds
    cfg.validate()
    out = _prepare_out_dir(args.out)
    write_effective_config(cfg, out)
    stream = VALIDATION_STREAM if args.split == "validation" else TRAIN_STREAM
    synthesize_dataset(out, cfg.synth, seed=cfg.seed, stream=stream, workers=worker_count())
    return EXIT_OK


def cmd_train(args, cfg):
    from .dataset_synth import read_dataset
    from .model import KeypatchNet
    from .training import train

    if args.epochs is not None:
        cfg.train = cfg.train.scaled(args.epochs)
    if args.batch_size is not None:
        cfg.train.batch_size = args.batch_size
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.train.seed = cfg.seed
    if os.environ.get(WORKERS_ENV):
        cfg.train.num_workers = worker_count()
    cfg.validate()
    out = _prepare_out_dir(args.out)
    write_effective_config(cfg, out)
    dataset = read_dataset(args.data, cfg.synth.degradations)
    validation = read_dataset(args.val) if args.val else None
    final, history = train(cfg.train, dataset, KeypatchNet(cfg.model), pretrained=args.pretrained,
                           out_dir=out, validation=validation, device=_device(args))
    console.ok(f"Final checkpoint: {final} ({len(history)} epochs logged)")
    return EXIT_OK


def _device(args):
    import torch
    if not getattr(args, "device", None):
        return default_device()
    try:
        return torch.device(args.device)
    except RuntimeError as exc:
        raise ConfigError(f"invalid --device {args.device!r}: {exc}") from exc


def _load_predictor(args, cfg):
    model, header = load_checkpoint(args.checkpoint, device=_device(args))
    model_cfg = model.cfg
    if getattr(args, "threshold", None) is not None:
        model_cfg.detect_threshold = args.threshold
    if getattr(args, "nms", None) is not None:
        model_cfg.nms_radius = args.nms
    model_cfg.validate()
    cfg.model = model_cfg
    return Predictor(model, model_cfg, input_scale=args.input_scale), header


def cmd_infer(args, cfg):
    paths = sorted(glob.glob(args.images, recursive=True))
    if not paths:
        raise FileNotFoundError(f"no images match {args.images}")
    predictor, header = _load_predictor(args, cfg)
    out_dir = _prepare_out_dir(os.path.dirname(os.path.abspath(args.out)))
    if args.overlay:
        _prepare_out_dir(args.overlay)
    console.section("INFERENCE")
    console.step(f"  {len(paths)} image(s), checkpoint epoch {header.get('epoch')}")

    results = []
    for path in paths:
        bgr = cv2.imread(path, cv2.IMREAD_COLOR)
        if bgr is None:
            console.warn(f"unreadable image skipped: {path}")
            continue
        rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
        detections = predictor.predict(rgb)
        results.append({"path": path, "detections": [d.to_dict() for d in detections]})
        if args.overlay:
            overlay = draw_detections(rgb, detections)
            cv2.imwrite(os.path.join(args.overlay, os.path.basename(path)),
                        cv2.cvtColor(overlay, cv2.COLOR_RGB2BGR))
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump({"checkpoint": args.checkpoint, "input_scale": args.input_scale,
                   "model_config": predictor.cfg.to_dict(), "images": results}, f, indent=2)
    write_effective_config(cfg, out_dir)
    console.ok(f"{sum(len(r['detections']) for r in results)} detections written to {args.out}")
    return EXIT_OK


def cmd_validate(args, cfg):
    from .dataset_synth import read_dataset

    predictor, _ = _load_predictor(args, cfg)
    out = _prepare_out_dir(args.out)
    write_effective_config(cfg, out)
    run_validation(predictor, read_dataset(args.data), input_scale=args.input_scale,
                   limit=args.limit, out_dir=out)
    return EXIT_OK


def cmd_sweep(args, cfg):
    predictor, _ = _load_predictor(args, cfg)
    spec = cfg.sweep
    axis = AXIS_ALIASES.get(args.axis, args.axis)
    if axis != spec.axis:
        spec.axis = axis
        spec.levels = None
        spec.__post_init__()
    if args.levels:
        spec.levels = list(args.levels)
    if args.images_per_level is not None:
        spec.images_per_level = args.images_per_level
    if args.seed is not None:
        cfg.seed = args.seed
    spec.seed = cfg.seed
    spec.input_scale = args.input_scale
    cfg.validate()
    out = _prepare_out_dir(args.out)
    write_effective_config(cfg, out)
    run_sweep(predictor, spec, out_dir=out)
    return EXIT_OK


def cmd_check_dataset(args, cfg):
    from .dataset_synth import DatasetValidator

    return EXIT_OK if DatasetValidator(args.data).validate() else EXIT_DATA


# ============================================================================
# PARSER
# ============================================================================

def build_parser():
    parser = argparse.ArgumentParser(prog="keypatch", description="Keypoint patch synthesis, training and evaluation")
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--quiet", action="store_true", help="only print warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="write design previews and the designs document")
    p.add_argument("--out", required=True)
    p.add_argument("--radius", type=int, default=64)
    p.add_argument("--rotation", type=float, default=0.0, help="degrees")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("generate", help="synthesize a labeled dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--split", choices=("train", "validation"), default="train")
    p.add_argument("--backgrounds", help="directory of background images (default: procedural)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run the staged training schedule")
    p.add_argument("--data", required=True)
    p.add_argument("--val", help="validation dataset root")
    p.add_argument("--pretrained", help="reference SuperPoint weights")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, help="rescale the schedule to this many epochs")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--device")
    p.set_defaults(func=cmd_train)

    def add_model_flags(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--threshold", type=float)
        p.add_argument("--nms", type=int)
        p.add_argument("--input-scale", type=float, default=1.0)
        p.add_argument("--device")

    p = sub.add_parser("infer", help="detect and identify keypoints in images")
    add_model_flags(p)
    p.add_argument("--images", required=True, help="glob pattern")
    p.add_argument("--out", required=True, help="detections JSON file")
    p.add_argument("--overlay", help="directory for annotated copies of the images")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("validate", help="score a checkpoint on a validation dataset")
    add_model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="runs/validate")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("sweep", help="hexagon-board sweep over one deterioration axis")
    add_model_flags(p)
    p.add_argument("--axis", required=True, choices=AXES + tuple(AXIS_ALIASES))
    p.add_argument("--levels", type=float, nargs="+")
    p.add_argument("--images-per-level", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="runs/sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("check-dataset", help="validate a dataset root")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_check_dataset)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    console.set_verbose(not args.quiet)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except KeypatchError as exc:
        console.error(f"{type(exc).__name__}: {exc}")
        return exc.exit_code
    except Exception as exc:
        console.error(f"{type(exc).__name__}: {exc}")
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
