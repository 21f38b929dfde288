"""Counting evaluation: run the detect-mask-estimate pipeline over a
dataset, score it with MAE/MSE, and split data for k-fold runs."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np

from .autodiff import Tensor
from .density import DotAnnotation
from .errors import InputValidationError
from .fusion import DetectionSet, FusionConfig, apply_masks, filter_detections, fuse_count
from .model import EnetModel, crop_output, forward, pad_to_multiple

EvalItem = Tuple[np.ndarray, DotAnnotation]  # (3, H, W) image plus its dots
REPORT_CSV_HEADER = "image_id,n_gt,n_d,n_e,c,abs_err"


@dataclass(frozen=True)
class ImageResult:
    image_id: str
    n_gt: int
    n_d: int
    n_e: float
    c: float

    @property
    def abs_err(self) -> float:
        return abs(self.c - self.n_gt)


@dataclass(frozen=True)
class CountReport:
    mae: float
    mse: float
    per_image: Tuple[ImageResult, ...]

    @property
    def rmse(self) -> float:
        return math.sqrt(self.mse)


def mae_mse(results: Sequence[ImageResult]) -> Tuple[float, float]:
    """Mean absolute error and mean squared error of the fused counts."""
    if not results:
        raise InputValidationError("cannot score an empty result set")
    errs = np.array([r.c - r.n_gt for r in results])
    return float(np.mean(np.abs(errs))), float(np.mean(errs ** 2))


def count_image(model: EnetModel, image: np.ndarray, ann: DotAnnotation,
                detections: DetectionSet, fusion_cfg: FusionConfig) -> ImageResult:
    """One pass of the full pipeline on a single image."""
    h, w = ann.height, ann.width
    retained = filter_detections(detections, fusion_cfg, (h, w))
    scene = apply_masks(image, ann, retained, fusion_cfg)
    padded, crop = pad_to_multiple(scene.masked_image)
    pred = crop_output(forward(model, Tensor(padded)), crop)
    rec = fuse_count(scene.n_d, pred)
    return ImageResult(image_id=ann.image_id, n_gt=ann.count,
                       n_d=rec.n_d, n_e=rec.n_e, c=rec.c)


def evaluate(model: EnetModel, items: Sequence[EvalItem],
             detections: Mapping[str, DetectionSet],
             fusion_cfg: FusionConfig) -> CountReport:
    """Score the model on every item, in dataset order.

    Every image must have a detection record (an empty one is fine); a
    missing record is an input error, not a zero-detection image.
    """
    results: List[ImageResult] = []
    for image, ann in items:
        if ann.image_id not in detections:
            raise InputValidationError(
                f"no detection record for image '{ann.image_id}'"
            )
        results.append(count_image(model, image, ann,
                                   detections[ann.image_id], fusion_cfg))
    mae, mse = mae_mse(results)
    return CountReport(mae=mae, mse=mse, per_image=tuple(results))


def make_folds(ids: Sequence[str], k: int, seed: int) -> List[List[str]]:
    """Shuffle once with the seed, then cut into k near-equal folds."""
    if k < 2:
        raise InputValidationError(f"need at least 2 folds, got {k}")
    if len(ids) < k:
        raise InputValidationError(
            f"cannot make {k} folds from {len(ids)} items"
        )
    order = np.random.default_rng(seed).permutation(len(ids))
    return [[ids[i] for i in chunk] for chunk in np.array_split(order, k)]


def cross_validate(items: Sequence[EvalItem],
                   detections: Mapping[str, DetectionSet],
                   k: int, seed: int,
                   train_fn: Callable[[Sequence[EvalItem]], EnetModel],
                   fusion_cfg: FusionConfig) -> CountReport:
    """k-fold evaluation: train on k-1 folds, score the held-out one.

    ``train_fn`` receives the training items and returns a fitted model.
    Each image is scored exactly once; the report aggregates all folds.
    """
    by_id = {ann.image_id: (image, ann) for image, ann in items}
    if len(by_id) != len(items):
        raise InputValidationError("duplicate image_id in cross-validation set")
    folds = make_folds([ann.image_id for _, ann in items], k, seed)

    results: List[ImageResult] = []
    for held_out in folds:
        held = set(held_out)
        train_items = [it for it in items if it[1].image_id not in held]
        model = train_fn(train_items)
        fold_report = evaluate(model, [by_id[i] for i in held_out],
                               detections, fusion_cfg)
        results.extend(fold_report.per_image)
    mae, mse = mae_mse(results)
    return CountReport(mae=mae, mse=mse, per_image=tuple(results))


def write_report_csv(report: CountReport, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_CSV_HEADER.split(","))
        for r in report.per_image:
            writer.writerow([r.image_id, r.n_gt, r.n_d,
                             f"{r.n_e:.17g}", f"{r.c:.17g}", f"{r.abs_err:.17g}"])


def write_report_json(report: CountReport, path: Union[str, Path]) -> None:
    doc: Dict = {
        "mae": report.mae,
        "mse": report.mse,
        "rmse": report.rmse,
        "n_images": len(report.per_image),
        "per_image": [
            {"image_id": r.image_id, "n_gt": r.n_gt, "n_d": r.n_d,
             "n_e": r.n_e, "c": r.c}
            for r in report.per_image
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")
