"""Detection ingestion, masking, and count fusion.

Detections arrive from a file (the detector itself is out of scope); the
useful ones are filtered by score and apparent size, their regions are
masked out of the image, dots under the masks are dropped from the
annotation, and the final count is detections plus the integral of the
density estimate over what remains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import binary_dilation

from .autodiff import Tensor
from .density import DotAnnotation
from .errors import InputValidationError

RleMask = Tuple[Tuple[int, int], Tuple[int, ...]]  # ((h, w), run lengths)


@dataclass(frozen=True)
class Detection:
    """One detector hit: a pixel box, a confidence, and optionally a
    run-length mask aligned to the box raster."""

    box: Tuple[float, float, float, float]  # x0, y0, x1, y1
    score: float
    label: str = "person"
    mask_rle: Optional[RleMask] = None

    def clamped(self, height: int, width: int) -> "Detection":
        x0, y0, x1, y1 = self.box
        return replace(self, box=(
            min(max(x0, 0.0), float(width)), min(max(y0, 0.0), float(height)),
            min(max(x1, 0.0), float(width)), min(max(y1, 0.0), float(height)),
        ))

    def raster(self) -> Tuple[int, int, int, int]:
        """Integer pixel rectangle (r0, c0, r1, c1), half-open, covering the box."""
        x0, y0, x1, y1 = self.box
        return (int(math.floor(y0)), int(math.floor(x0)),
                int(math.ceil(y1)), int(math.ceil(x1)))

    def validate(self, index: int, height: int, width: int) -> None:
        x0, y0, x1, y1 = self.box
        if not all(math.isfinite(v) for v in self.box):
            raise InputValidationError(f"detections[{index}]: non-finite box {self.box}")
        c = self.clamped(height, width)
        cx0, cy0, cx1, cy1 = c.box
        if not (cx0 < cx1 and cy0 < cy1):
            raise InputValidationError(
                f"detections[{index}]: box {self.box} is empty after clamping "
                f"to {width}x{height}"
            )
        if not (0.0 <= self.score <= 1.0):
            raise InputValidationError(
                f"detections[{index}]: score {self.score} outside [0, 1]"
            )
        if self.mask_rle is not None:
            (mh, mw), counts = self.mask_rle
            r0, c0, r1, c1 = c.raster()
            if (mh, mw) != (r1 - r0, c1 - c0):
                raise InputValidationError(
                    f"detections[{index}]: mask size {(mh, mw)} does not match "
                    f"the box raster {(r1 - r0, c1 - c0)}"
                )
            if any(n < 0 for n in counts):
                raise InputValidationError(
                    f"detections[{index}]: negative run length in mask counts"
                )
            if sum(counts) != mh * mw:
                raise InputValidationError(
                    f"detections[{index}]: mask run lengths sum to {sum(counts)}, "
                    f"expected {mh * mw}"
                )


@dataclass(frozen=True)
class DetectionSet:
    image_id: str
    detections: Tuple[Detection, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))


@dataclass(frozen=True)
class FusionConfig:
    score_threshold: float = 0.7
    min_box_height_frac: float = 0.10
    mask_dilation_px: int = 2

    def __post_init__(self):
        if not (0.0 < self.score_threshold <= 1.0):
            raise InputValidationError(
                f"score_threshold must be in (0, 1], got {self.score_threshold}"
            )
        if not (0.0 < self.min_box_height_frac <= 1.0):
            raise InputValidationError(
                f"min_box_height_frac must be in (0, 1], got {self.min_box_height_frac}"
            )
        if self.mask_dilation_px < 0:
            raise InputValidationError(
                f"mask_dilation_px must be >= 0, got {self.mask_dilation_px}"
            )


@dataclass
class MaskedScene:
    masked_image: np.ndarray  # (3, H, W), detected regions zero-filled
    residual_annotation: DotAnnotation
    n_d: int
    region_mask: np.ndarray  # (H, W) bool, True where masked


@dataclass(frozen=True)
class CountRecord:
    n_d: int
    n_e: float
    c: float


def rle_decode(size: Tuple[int, int], counts: Sequence[int]) -> np.ndarray:
    """Column-major run lengths, first run is background, to an (h, w) bool grid."""
    h, w = size
    if sum(counts) != h * w:
        raise InputValidationError(
            f"run lengths sum to {sum(counts)}, expected {h}x{w} = {h * w}"
        )
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for n in counts:
        flat[pos:pos + n] = value
        pos += n
        value = not value
    return flat.reshape((w, h)).T


def rle_encode(mask: np.ndarray) -> RleMask:
    """Inverse of rle_decode; first count is 0 when the mask starts foreground."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    flat = mask.flatten(order="F")
    counts = []
    value = False
    run = 0
    for bit in flat:
        if bit == value:
            run += 1
        else:
            counts.append(run)
            value = bit
            run = 1
    counts.append(run)
    return (h, w), tuple(counts)


def filter_detections(ds: DetectionSet, cfg: FusionConfig,
                      image_extents: Tuple[int, int]) -> DetectionSet:
    """Keep the detections the pipeline trusts: scored at or above the
    threshold, tall enough relative to the image, and labeled person."""
    h, w = image_extents
    kept = []
    for i, det in enumerate(ds.detections):
        det.validate(i, h, w)
        c = det.clamped(h, w)
        box_height = c.box[3] - c.box[1]
        if c.score >= cfg.score_threshold and box_height >= cfg.min_box_height_frac * h \
                and c.label == "person":
            kept.append(c)
    return DetectionSet(image_id=ds.image_id, detections=tuple(kept))


def _region_mask(retained: DetectionSet, cfg: FusionConfig, h: int, w: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    for det in retained.detections:
        r0, c0, r1, c1 = det.clamped(h, w).raster()
        if det.mask_rle is not None:
            local = rle_decode(*det.mask_rle)
            mask[r0:r1, c0:c1] |= local
        else:
            mask[r0:r1, c0:c1] = True
    if cfg.mask_dilation_px > 0 and mask.any():
        mask = binary_dilation(mask, structure=np.ones((3, 3), dtype=bool),
                               iterations=cfg.mask_dilation_px)
    return mask


def apply_masks(image: np.ndarray, ann: DotAnnotation, retained: DetectionSet,
                cfg: FusionConfig) -> MaskedScene:
    """Zero out detected regions and drop the dots they cover.

    ``retained`` is expected to be pre-filtered. Masks are dilated a little
    so people poking past their boxes do not leak into the density target.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise InputValidationError(f"expected a (3, H, W) image, got shape {image.shape}")
    h, w = image.shape[1], image.shape[2]
    if (ann.height, ann.width) != (h, w):
        raise InputValidationError(
            f"annotation extents {ann.width}x{ann.height} do not match image {w}x{h}"
        )
    for i, det in enumerate(retained.detections):
        det.validate(i, h, w)

    region = _region_mask(retained, cfg, h, w)
    masked = image.copy()
    masked[:, region] = 0.0

    keep = [
        (x, y) for x, y in ann.points
        if not region[min(int(math.floor(y)), h - 1), min(int(math.floor(x)), w - 1)]
    ]
    residual = DotAnnotation(
        image_id=ann.image_id, width=ann.width, height=ann.height,
        points=np.asarray(keep, dtype=np.float64).reshape(-1, 2),
    )
    return MaskedScene(
        masked_image=masked,
        residual_annotation=residual,
        n_d=len(retained.detections),
        region_mask=region,
    )


def fuse_count(n_d: int, pred) -> CountRecord:
    """Final count: people found by the detector plus the integral of the
    density estimate over the masked image."""
    data = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    n_e = float(data.sum())
    return CountRecord(n_d=int(n_d), n_e=n_e, c=float(n_d) + n_e)


def mock_detect(ann: DotAnnotation, recall: float, box_h: int, seed: int) -> DetectionSet:
    """Deterministic detector stand-in.

    Picks floor(recall * |points|) dots by seeded choice and emits a
    score-1.0 square box of side ``box_h`` around each. Boxes are shifted
    (never shrunk) back inside the image so every emitted box still covers
    its dot and keeps its full height near borders.
    """
    if not (0.0 <= recall <= 1.0):
        raise InputValidationError(f"recall must be in [0, 1], got {recall}")
    if box_h < 1:
        raise InputValidationError(f"box_h must be >= 1, got {box_h}")
    n = ann.count
    k = int(math.floor(recall * n))
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(n, size=k, replace=False).tolist()) if k else []

    side = float(box_h)
    dets = []
    for idx in chosen:
        x, y = ann.points[idx]
        x0 = x - side / 2.0
        y0 = y - side / 2.0
        x0 = min(max(x0, 0.0), max(ann.width - side, 0.0))
        y0 = min(max(y0, 0.0), max(ann.height - side, 0.0))
        x1 = min(x0 + side, float(ann.width))
        y1 = min(y0 + side, float(ann.height))
        dets.append(Detection(box=(x0, y0, x1, y1), score=1.0, label="person"))
    return DetectionSet(image_id=ann.image_id, detections=tuple(dets))
