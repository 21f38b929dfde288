"""Command-line entry points for the counting pipeline.

Every command writes its artifacts under --out along with a manifest.json
echoing the fully resolved configuration, the seed, and what was produced,
so a run can be reproduced from the manifest alone. Nothing in the outputs
depends on wall-clock time.

Exit codes: 0 success, 1 rejected input (bad config, malformed files,
failed gradient check), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from .autodiff import Tensor
from .config import RunConfig, apply_overrides, config_as_dict, load_run_config
from .density import DotAnnotation, generate_density_map
from .errors import DenetError, InputValidationError
from .evaluation import (
    evaluate,
    write_report_csv,
    write_report_json,
)
from .fileio import (
    load_annotation,
    load_checkpoint,
    load_detections,
    load_image,
    save_annotation,
    save_detections,
    save_grid,
    save_gray_image,
    save_image,
)
from .fusion import apply_masks, filter_detections, fuse_count, mock_detect
from .gradcheck import (
    END_TO_END_TOLERANCE,
    OP_TOLERANCE,
    end_to_end_gradient_check,
    op_gradient_suite,
)
from .model import build_model, crop_output, forward, load_parameters, pad_to_multiple
from .plotting import plot_count_report, plot_loss_curve
from .synth import synth_scene
from .training import train


# --------------------------------------------------------------- plumbing

def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolved_config(args) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None))
    overrides = {
        "seed": getattr(args, "seed", None),
        "loss.alpha": getattr(args, "alpha", None),
        "kernel.sigma_fixed": getattr(args, "sigma", None),
        "kernel.mode": getattr(args, "mode", None),
        "fusion.score_threshold": getattr(args, "score_threshold", None),
        "fusion.min_box_height_frac": getattr(args, "min_box_frac", None),
        "train.epochs": getattr(args, "epochs", None),
        "train.lr_initial": getattr(args, "lr", None),
        "train.batch_size": getattr(args, "batch_size", None),
    }
    return apply_overrides(cfg, **overrides)


def _write_manifest(out: Path, command: str, cfg: RunConfig,
                    inputs: Dict[str, Any], outputs: Dict[str, Any],
                    extra: Optional[Dict[str, Any]] = None) -> None:
    doc: Dict[str, Any] = {
        "command": command,
        "seed": cfg.seed,
        "config": config_as_dict(cfg),
        "inputs": inputs,
        "outputs": outputs,
    }
    if extra:
        doc.update(extra)
    with open(out / "manifest.json", "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def _annotation_files(path_str: str) -> List[Path]:
    path = Path(path_str)
    if path.is_dir():
        files = sorted(p for p in path.glob("*.json") if p.name != "manifest.json")
        if not files:
            raise InputValidationError(f"{path}: no *.json annotation files found")
        return files
    if path.is_file():
        return [path]
    raise InputValidationError(f"{path}: no such file or directory")


def _load_model_from(cfg: RunConfig, checkpoint: str):
    model = build_model(cfg.model, seed=cfg.seed)
    load_parameters(model, load_checkpoint(checkpoint))
    return model


def _gather_dataset(args, cfg: RunConfig):
    """(image, annotation) items plus per-image detection sets, discovered
    from the annotation directory and matched by image_id."""
    items, det_map = [], {}
    for ann_path in _annotation_files(args.annotations):
        ann = load_annotation(ann_path)
        image_path = Path(args.images) / f"{ann.image_id}.png"
        if not image_path.exists():
            raise InputValidationError(
                f"no image {image_path} for annotation '{ann.image_id}'"
            )
        image = load_image(image_path)
        if image.shape[1:] != (ann.height, ann.width):
            raise InputValidationError(
                f"image '{ann.image_id}' is {image.shape[2]}x{image.shape[1]} "
                f"but its annotation says {ann.width}x{ann.height}"
            )
        det_path = Path(args.detections) / f"{ann.image_id}.json"
        if not det_path.exists():
            raise InputValidationError(
                f"no detection record {det_path} for image '{ann.image_id}'"
            )
        items.append((image, ann))
        det_map[ann.image_id] = load_detections(det_path)
    return items, det_map


# --------------------------------------------------------------- commands

def cmd_gen_gt(args) -> int:
    out = _out_dir(args)
    cfg = _resolved_config(args)
    grids: Dict[str, Dict[str, Any]] = {}
    for ann_path in _annotation_files(args.annotations):
        ann = load_annotation(ann_path)
        grid = generate_density_map(ann, cfg.kernel)
        name = f"{ann.image_id}.grid.denet"
        save_grid(grid, out / name)
        grids[ann.image_id] = {"path": name, "n_dots": ann.count,
                               "sum": grid.total()}
    _write_manifest(out, "gen-gt", cfg,
                    inputs={"annotations": args.annotations},
                    outputs={"grids": sorted(g["path"] for g in grids.values())},
                    extra={"grids": grids})
    return 0


def cmd_mock_detect(args) -> int:
    out = _out_dir(args)
    cfg = _resolved_config(args)
    records: Dict[str, Dict[str, Any]] = {}
    for ann_path in _annotation_files(args.annotations):
        ann = load_annotation(ann_path)
        ds = mock_detect(ann, recall=args.recall, box_h=args.box_h, seed=cfg.seed)
        name = f"{ann.image_id}.json"
        save_detections(ds, out / name)
        records[ann.image_id] = {"path": name, "n_detected": len(ds.detections)}
    _write_manifest(out, "mock-detect", cfg,
                    inputs={"annotations": args.annotations,
                            "recall": args.recall, "box_h": args.box_h},
                    outputs={"detections": sorted(r["path"] for r in records.values())},
                    extra={"detections_per_image": records})
    return 0


def cmd_train(args) -> int:
    out = _out_dir(args)
    cfg = _resolved_config(args)
    items, det_map = _gather_dataset(args, cfg)

    scenes = []
    for image, ann in items:
        retained = filter_detections(det_map[ann.image_id], cfg.fusion,
                                     (ann.height, ann.width))
        scene = apply_masks(image, ann, retained, cfg.fusion)
        gt = generate_density_map(scene.residual_annotation, cfg.kernel)
        scenes.append((scene, gt))

    model = build_model(cfg.model, seed=cfg.seed)
    ckpt = out / "checkpoint.denet"
    loss_csv = out / "loss.csv"
    train(scenes, model, cfg.loss, cfg.train, ckpt, loss_csv,
          state_prefix=out / "train")
    if cfg.train.epochs > 0:
        plot_loss_curve(loss_csv, out / "loss_curve.png")

    outputs = {"checkpoint": ckpt.name, "loss_csv": loss_csv.name,
               "state": ["train.state.json", "train.moments.denet"]}
    if cfg.train.epochs > 0:
        outputs["loss_curve"] = "loss_curve.png"
    _write_manifest(out, "train", cfg,
                    inputs={"images": args.images,
                            "annotations": args.annotations,
                            "detections": args.detections,
                            "n_images": len(items)},
                    outputs=outputs)
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    cfg = _resolved_config(args)
    items, det_map = _gather_dataset(args, cfg)
    model = _load_model_from(cfg, args.checkpoint)

    report = evaluate(model, items, det_map, cfg.fusion)
    write_report_csv(report, out / "report.csv")
    write_report_json(report, out / "report.json")
    plot_count_report(report, out / "report.png")

    _write_manifest(out, "eval", cfg,
                    inputs={"images": args.images,
                            "annotations": args.annotations,
                            "detections": args.detections,
                            "checkpoint": args.checkpoint,
                            "n_images": len(report.per_image)},
                    outputs={"report_csv": "report.csv",
                             "report_json": "report.json",
                             "report_png": "report.png"},
                    extra={"mae": report.mae, "mse": report.mse})
    return 0


def cmd_infer(args) -> int:
    out = _out_dir(args)
    cfg = _resolved_config(args)
    image = load_image(args.image)
    h, w = image.shape[1], image.shape[2]
    model = _load_model_from(cfg, args.checkpoint)

    n_d = 0
    if args.detections:
        ds = load_detections(args.detections)
        retained = filter_detections(ds, cfg.fusion, (h, w))
        blank = DotAnnotation(ds.image_id, w, h, np.zeros((0, 2)))
        scene = apply_masks(image, blank, retained, cfg.fusion)
        image, n_d = scene.masked_image, scene.n_d

    padded, crop = pad_to_multiple(image)
    pred = crop_output(forward(model, Tensor(padded)), crop)
    density = pred.data[0]
    assert density.shape == (h, w)
    rec = fuse_count(n_d, density)

    save_grid(density, out / "density.grid.denet")
    save_gray_image(density, out / "density.png")
    _write_manifest(out, "infer", cfg,
                    inputs={"image": args.image,
                            "checkpoint": args.checkpoint,
                            "detections": args.detections,
                            "width": w, "height": h},
                    outputs={"grid": "density.grid.denet",
                             "visualization": "density.png"},
                    extra={"n_d": rec.n_d, "n_e": rec.n_e, "count": rec.c})
    return 0


def cmd_gradcheck(args) -> int:
    seeds = tuple(range(args.seed, args.seed + args.n_seeds))
    worst = op_gradient_suite(seeds)
    for name in sorted(worst):
        print(f"{name:24s} max rel err {worst[name]:.3e}")
    worst_op = max(worst.values())
    ok = worst_op < OP_TOLERANCE
    print(f"op suite: worst {worst_op:.3e} "
          f"({'OK' if ok else 'FAIL'}, tolerance {OP_TOLERANCE:.0e})")
    if args.end_to_end:
        e2e = end_to_end_gradient_check(seeds)
        e2e_ok = e2e < END_TO_END_TOLERANCE
        ok = ok and e2e_ok
        print(f"end to end: worst {e2e:.3e} "
              f"({'OK' if e2e_ok else 'FAIL'}, tolerance {END_TO_END_TOLERANCE:.0e})")
    return 0 if ok else 1


def cmd_synth(args) -> int:
    out = _out_dir(args)
    cfg = _resolved_config(args)
    if args.min_dots > args.max_dots:
        raise InputValidationError(
            f"--min-dots {args.min_dots} exceeds --max-dots {args.max_dots}"
        )
    img_dir = out / "images"
    ann_dir = out / "annotations"
    img_dir.mkdir(exist_ok=True)
    ann_dir.mkdir(exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    scenes: Dict[str, int] = {}
    for i in range(args.n):
        n_dots = int(rng.integers(args.min_dots, args.max_dots + 1))
        image_id = f"synth{i:03d}"
        image, ann = synth_scene(image_id, args.height, args.width, n_dots,
                                 seed=int(rng.integers(0, 2 ** 31)),
                                 min_dist=args.min_dist)
        save_image(image, img_dir / f"{image_id}.png")
        save_annotation(ann, ann_dir / f"{image_id}.json")
        scenes[image_id] = n_dots
    _write_manifest(out, "synth", cfg,
                    inputs={"n": args.n, "width": args.width,
                            "height": args.height,
                            "min_dots": args.min_dots, "max_dots": args.max_dots,
                            "min_dist": args.min_dist},
                    outputs={"images": "images", "annotations": "annotations"},
                    extra={"dots_per_image": scenes})
    return 0


# --------------------------------------------------------------- parser

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="run seed (overrides the config)")
    p.add_argument("--alpha", type=float, help="counting-loss weight")
    p.add_argument("--sigma", type=float, help="fixed kernel width in pixels")
    p.add_argument("--mode", choices=("fixed", "adaptive"),
                   help="kernel width policy")
    p.add_argument("--score-threshold", type=float,
                   help="minimum detection confidence")
    p.add_argument("--min-box-frac", type=float,
                   help="minimum box height as a fraction of image height")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--batch-size", type=int, help="samples per update")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="denet",
        description="Count people by masking detections out of the image and "
                    "integrating a learned density map over what remains.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-gt", help="render density ground truth grids")
    p.add_argument("--annotations", required=True,
                   help="annotation JSON file or directory")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_gen_gt)

    p = sub.add_parser("mock-detect", help="emit stand-in detector output")
    p.add_argument("--annotations", required=True)
    p.add_argument("--recall", type=float, default=0.5,
                   help="fraction of dots the stand-in detector finds")
    p.add_argument("--box-h", type=int, default=8, help="emitted box side in px")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_mock_detect)

    p = sub.add_parser("train", help="fit the density network")
    p.add_argument("--images", required=True, help="directory of <id>.png")
    p.add_argument("--annotations", required=True, help="directory of <id>.json")
    p.add_argument("--detections", required=True, help="directory of <id>.json")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--images", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="density map and count for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--detections", help="optional detection JSON to mask first")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-seeds", type=int, default=10)
    p.add_argument("--end-to-end", action="store_true",
                   help="also check the full network and loss")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic blob-scene dataset")
    p.add_argument("--n", type=int, required=True, help="number of scenes")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--min-dots", type=int, default=5)
    p.add_argument("--max-dots", type=int, default=30)
    p.add_argument("--min-dist", type=float, default=0.0,
                   help="minimum spacing between dot centers in px")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_synth)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except InputValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DenetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
