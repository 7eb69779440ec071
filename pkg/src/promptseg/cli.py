"""Command-line driver wiring the whole pipeline.

Subcommands: synth (generate a dataset), train, eval (student, oracle-box,
oracle-point or detsam mode), infer (single image) and plot (color overlay).
Errors exit with one line on stderr and a code that identifies the error
class; usage problems exit 2.
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
from PIL import Image

from . import errors
from .backend import load_backend
from .baseline import det_sam_predict, load_detections_file, make_oracle_detector
from .config import Config, config_hash, config_to_text, load_config
from .data import (category_palette, derive_weak_labels, generate_synthetic,
                   load_dataset, save_dataset, save_indexed_png, split_dataset)
from .evaluation import evaluate_dataset, save_report
from .inference import oracle_predict, predict_image
from .teacher import TeacherPrompter
from .trainer import fit, load_checkpoint
from .types import ImageTensor, LabelKind

logger = logging.getLogger(__name__)

CONFIG_ENV_VAR = "PROMPTSEG_CONFIG"

# Stable nonzero exit code per error class; argparse usage errors exit 2.
_EXIT_CODES: list[tuple[type, int]] = [
    (errors.InvalidConfig, 3),
    (errors.ShapeMismatch, 4),
    (errors.DimMismatch, 4),
    (errors.VersionMismatch, 5),
    (errors.CorruptFile, 6),
    (errors.MissingImage, 7),
    (errors.MalformedAnnotation, 8),
    (errors.InvalidFraction, 9),
    (errors.TooManyParts, 10),
    (errors.OutOfBounds, 11),
    (errors.DegenerateBox, 11),
    (errors.NonFiniteLoss, 12),
    (errors.NonFinite, 12),
    (errors.EmptyEvaluation, 13),
    (errors.GuardedMaskError, 14),
    (errors.PromptsegError, 15),
    (OSError, 16),
]

_SUPERVISION = {"box": LabelKind.BOX, "point": LabelKind.POINT}


def main() -> None:
    raise SystemExit(run_command(sys.argv[1:]))


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # mapped to stable exit codes below
        for klass, code in _EXIT_CODES:
            if isinstance(exc, klass):
                print(f"error: {exc}", file=sys.stderr)
                return code
        print(f"error: unexpected {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptseg",
        description="weakly supervised part segmentation with a distilled prompter")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic rectangle-parts dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, default=500, help="training images")
    p.add_argument("--val-n", type=int, default=100, help="validation images")
    p.add_argument("--categories", type=int, default=3)
    p.add_argument("--max-parts", type=int, default=4)
    p.add_argument("--size", type=int, default=128, help="image side in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the student prompter")
    _add_config_flag(p)
    p.add_argument("--data", required=True, help="dataset directory (from synth)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--backend", default="mock")
    p.add_argument("--supervision", choices=sorted(_SUPERVISION), default="box")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=10)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a predictor on a dataset")
    _add_config_flag(p)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", required=True,
                   choices=["student", "oracle-box", "oracle-point", "detsam"])
    p.add_argument("--checkpoint", help="required for --mode student")
    p.add_argument("--backend", default="mock")
    p.add_argument("--out", help="metrics JSON path (default: print to stdout)")
    p.add_argument("--jitter", type=float, default=0.0, help="detsam corner noise std "
                   "as a fraction of image size")
    p.add_argument("--drop", type=float, default=0.0, help="detsam box drop probability")
    p.add_argument("--det-seed", type=int, default=0)
    p.add_argument("--detections", help="detsam detections JSON file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment a single image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="indexed PNG output path")
    p.add_argument("--backend", default="mock")
    p.add_argument("--overlay", help="optional color overlay PNG path")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("plot", help="render a color overlay of a segmentation")
    p.add_argument("--pred", required=True, help="indexed PNG prediction")
    p.add_argument("--gt", help="optional indexed PNG ground truth, shown side by side")
    p.add_argument("--image", help="optional source image to blend over")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def _add_config_flag(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=os.environ.get(CONFIG_ENV_VAR),
                        help=f"config file (default: ${CONFIG_ENV_VAR})")


def _require_config(args) -> Config:
    if not args.config:
        raise errors.InvalidConfig(
            f"no config file: pass --config or set ${CONFIG_ENV_VAR}")
    cfg = load_config(args.config)
    logger.info("config %s hash %s", args.config, config_hash(cfg))
    return cfg


def _write_manifest(out_dir: Path, args, cfg: Config | None, outputs: list[str]) -> None:
    manifest = {
        "command": args.command,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "outputs": outputs,
    }
    if cfg is not None:
        manifest["config_hash"] = config_hash(cfg)
        manifest["config"] = config_to_text(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


# -- subcommands -----------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    total = args.n + args.val_n
    dataset = generate_synthetic(total, args.categories, args.max_parts,
                                 args.size, args.seed)
    if args.val_n > 0:
        train, val = split_dataset(dataset, (args.n / total, args.val_n / total),
                                   args.seed)
        save_dataset(train, out / "train")
        save_dataset(val, out / "val")
        outputs = ["train", "val"]
    else:
        save_dataset(dataset, out / "train")
        outputs = ["train"]
    _write_manifest(out, args, None, outputs)
    logger.info("wrote %d+%d images to %s", args.n, args.val_n, out)
    return 0


def _data_split(data_dir: str, split: str) -> Path:
    root = Path(data_dir)
    return root / split if (root / split).exists() else root


def cmd_train(args) -> int:
    cfg = _require_config(args)
    backend = load_backend(args.backend, cfg)
    teacher = TeacherPrompter(cfg)
    dataset = load_dataset(_data_split(args.data, "train"))
    out = Path(args.out)
    state = fit(cfg, dataset, backend, teacher, out_dir=out,
                supervision=_SUPERVISION[args.supervision],
                resume_from=args.resume, checkpoint_every=args.checkpoint_every)
    _write_manifest(out, args, cfg,
                    ["checkpoint_final.bin", "loss_log.csv", "config.txt"])
    logger.info("trained %d epochs, final loss %.5f", state.epoch,
                state.loss_history[-1]["loss"] if state.loss_history else float("nan"))
    return 0


def cmd_eval(args) -> int:
    if args.mode == "student":
        if not args.checkpoint:
            raise errors.InvalidConfig("--mode student requires --checkpoint")
        state = load_checkpoint(
            args.checkpoint,
            expected_config=load_config(args.config) if args.config else None)
        cfg = state.config
    else:
        state = None
        cfg = _require_config(args)
    logger.info("eval mode %s, config hash %s", args.mode, config_hash(cfg))
    backend = load_backend(args.backend, cfg)
    teacher = TeacherPrompter(cfg)
    dataset = load_dataset(_data_split(args.data, "val"))

    if args.mode == "student":
        predictor = lambda rec: predict_image(rec.image, state, backend, cfg)
    elif args.mode == "oracle-box":
        predictor = lambda rec: oracle_predict(rec.image, rec.weak_labels,
                                               teacher, backend, cfg)
    elif args.mode == "oracle-point":
        predictor = lambda rec: oracle_predict(
            rec.image, derive_weak_labels(rec, LabelKind.POINT), teacher, backend, cfg)
    else:
        if args.detections:
            detector = load_detections_file(args.detections, cfg.num_categories)
        else:
            detector = make_oracle_detector(args.jitter, args.drop, args.det_seed,
                                            cfg.image_size)
        predictor = lambda rec: det_sam_predict(rec, detector, teacher, backend, cfg)

    report = evaluate_dataset(dataset, predictor, cfg)
    if args.out:
        save_report(report, args.out)
        logger.info("wrote %s", args.out)
    else:
        json.dump(report, sys.stdout, indent=1, sort_keys=True)
        print()
    logger.info("mIoU %.4f mACC %.4f over %d images",
                report["miou"], report["macc"], report["num_images"])
    return 0


def cmd_infer(args) -> int:
    state = load_checkpoint(args.checkpoint)
    cfg = state.config
    logger.info("config hash %s", config_hash(cfg))
    backend = load_backend(args.backend, cfg)
    image = _load_image(args.image, cfg.image_size)
    seg = predict_image(image, state, backend, cfg)
    save_indexed_png(seg.labels, cfg.num_categories, args.out)
    _write_legend(args.out, cfg.num_categories)
    if args.overlay:
        pixels = (image.pixels.numpy() * 255.0).round().astype(np.uint8)
        emit_overlay(pixels, seg.labels, cfg.num_categories, args.overlay)
    return 0


def cmd_plot(args) -> int:
    pred = _load_labels(args.pred)
    panels = [pred]
    if args.gt:
        gt = _load_labels(args.gt)
        if gt.shape != pred.shape:
            raise errors.ShapeMismatch(f"gt {gt.shape} vs pred {pred.shape}")
        panels.append(gt)
    num_categories = max(int(p.max()) for p in panels)
    if args.image:
        with Image.open(args.image) as img:
            base = np.asarray(
                img.convert("RGB").resize(pred.shape[::-1], Image.BILINEAR))
    else:
        base = np.full((*pred.shape, 3), 255, dtype=np.uint8)
    rendered = [_blend(base, labels, num_categories) for labels in panels]
    Image.fromarray(np.concatenate(rendered, axis=1)).save(args.out)
    _write_legend(args.out, num_categories)
    return 0


# -- helpers ---------------------------------------------------------------

OVERLAY_ALPHA = 0.55


def emit_overlay(image: np.ndarray, labels: np.ndarray, num_categories: int,
                 path) -> None:
    """Alpha-blend category colors over the image; background pixels pass
    through untouched, so an all-background map reproduces the input."""
    Image.fromarray(_blend(image, labels, num_categories)).save(path)
    _write_legend(path, num_categories)


def _blend(image: np.ndarray, labels: np.ndarray, num_categories: int) -> np.ndarray:
    palette = np.array(category_palette(num_categories), dtype=np.float64)
    out = image.astype(np.float64).copy()
    fg = labels < num_categories
    colors = palette[labels[fg]]
    out[fg] = (1.0 - OVERLAY_ALPHA) * out[fg] + OVERLAY_ALPHA * colors
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _write_legend(image_path, num_categories: int) -> None:
    legend = {str(i): f"part_{i}" for i in range(num_categories)}
    legend[str(num_categories)] = "background"
    with open(Path(image_path).with_suffix(".legend.json"), "w") as fh:
        json.dump(legend, fh, indent=1, sort_keys=True)


def _load_image(path, size: int) -> ImageTensor:
    if not Path(path).exists():
        raise errors.MissingImage(str(path))
    with Image.open(path) as img:
        src = img.convert("RGB")
        original = src.size
        resized = src.resize((size, size), Image.BILINEAR)
    pixels = np.asarray(resized, dtype=np.float32) / 255.0
    return ImageTensor(pixels=torch.from_numpy(pixels), original_size=original)


def _load_labels(path) -> np.ndarray:
    if not Path(path).exists():
        raise errors.MissingImage(str(path))
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.int64)
