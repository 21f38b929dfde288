"""Serialization: checkpoints, density grids, annotation and detection JSON,
and image ingestion.

Binary formats are little-endian and dead simple on purpose:

  DENETCKPT1: magic, then per parameter
      uint32 name length, UTF-8 name, uint32 rank, uint32 extents,
      float64 values row-major
  until end of file. Order is preserved, round trips are bit-exact.

  DENETGRID1: magic, uint32 width, uint32 height, then height*width
      float64 values row-major.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np
from PIL import Image

from .autodiff import Tensor
from .density import DensityGrid, DotAnnotation
from .errors import InputValidationError
from .fusion import Detection, DetectionSet

CKPT_MAGIC = b"DENETCKPT1"
GRID_MAGIC = b"DENETGRID1"

PathLike = Union[str, Path]


# ------------------------------------------------------------- checkpoints

def save_checkpoint(params: Mapping[str, Union[Tensor, np.ndarray]], path: PathLike) -> None:
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        for name, value in params.items():
            data = value.data if isinstance(value, Tensor) else np.asarray(value)
            data = np.ascontiguousarray(data, dtype=np.float64)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.astype("<f8").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise InputValidationError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path: PathLike) -> Dict[str, np.ndarray]:
    """Parameters in file order. Raises on a bad magic or truncation."""
    out: Dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise InputValidationError(
                f"{path}: not a DENETCKPT1 file (magic {magic!r})"
            )
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise InputValidationError("checkpoint truncated while reading name length")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len, "parameter name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, f"rank of {name}"))
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"extents of {name}"))
            count = int(np.prod(shape)) if rank else 1
            raw = _read_exact(f, 8 * count, f"values of {name}")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return out


# ------------------------------------------------------------ density grids

def save_grid(grid: Union[DensityGrid, np.ndarray], path: PathLike) -> None:
    values = grid.values if isinstance(grid, DensityGrid) else np.asarray(grid)
    if values.ndim != 2:
        raise InputValidationError(f"grid must be 2-d, got shape {values.shape}")
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<II", w, h))
        f.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def load_grid(path: PathLike) -> DensityGrid:
    with open(path, "rb") as f:
        magic = f.read(len(GRID_MAGIC))
        if magic != GRID_MAGIC:
            raise InputValidationError(f"{path}: not a DENETGRID1 file (magic {magic!r})")
        header = f.read(8)
        if len(header) != 8:
            raise InputValidationError(f"{path}: grid header truncated")
        w, h = struct.unpack("<II", header)
        raw = f.read()
    if len(raw) != 8 * w * h:
        raise InputValidationError(
            f"{path}: expected {8 * w * h} value bytes for {w}x{h}, got {len(raw)}"
        )
    return DensityGrid(np.frombuffer(raw, dtype="<f8").reshape(h, w).astype(np.float64))


# -------------------------------------------------------------------- JSON

def _require(obj: dict, key: str, kind, where: str):
    if key not in obj:
        raise InputValidationError(f"{where}: missing required key '{key}'")
    value = obj[key]
    if kind is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise InputValidationError(f"{where}: '{key}' must be a number, got {value!r}")
        return float(value)
    if kind is int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise InputValidationError(f"{where}: '{key}' must be an integer, got {value!r}")
        return value
    if not isinstance(value, kind):
        raise InputValidationError(
            f"{where}: '{key}' must be {kind.__name__}, got {type(value).__name__}"
        )
    return value


def _reject_unknown(obj: dict, allowed: set, where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise InputValidationError(f"{where}: unknown key '{sorted(unknown)[0]}'")


def load_annotation(path: PathLike) -> DotAnnotation:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise InputValidationError(f"{path}: invalid JSON ({e})") from e
    return parse_annotation(doc, where=str(path))


def parse_annotation(doc, where: str = "annotation") -> DotAnnotation:
    if not isinstance(doc, dict):
        raise InputValidationError(f"{where}: expected a JSON object")
    _reject_unknown(doc, {"image_id", "width", "height", "points"}, where)
    image_id = _require(doc, "image_id", str, where)
    width = _require(doc, "width", int, where)
    height = _require(doc, "height", int, where)
    points = _require(doc, "points", list, where)
    for i, p in enumerate(points):
        if (not isinstance(p, list)) or len(p) != 2 or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in p):
            raise InputValidationError(
                f"{where}: points[{i}] must be a [x, y] number pair, got {p!r}"
            )
    ann = DotAnnotation(image_id=image_id, width=width, height=height,
                        points=np.asarray(points, dtype=np.float64).reshape(-1, 2))
    return ann.validate()


def save_annotation(ann: DotAnnotation, path: PathLike) -> None:
    doc = {
        "image_id": ann.image_id,
        "width": int(ann.width),
        "height": int(ann.height),
        "points": [[float(x), float(y)] for x, y in ann.points],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def load_detections(path: PathLike) -> DetectionSet:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise InputValidationError(f"{path}: invalid JSON ({e})") from e
    return parse_detections(doc, where=str(path))


def parse_detections(doc, where: str = "detections") -> DetectionSet:
    if not isinstance(doc, dict):
        raise InputValidationError(f"{where}: expected a JSON object")
    _reject_unknown(doc, {"image_id", "detections"}, where)
    image_id = _require(doc, "image_id", str, where)
    entries = _require(doc, "detections", list, where)
    dets = []
    for i, entry in enumerate(entries):
        at = f"{where}: detections[{i}]"
        if not isinstance(entry, dict):
            raise InputValidationError(f"{at} must be an object")
        _reject_unknown(entry, {"box", "score", "label", "mask_rle"}, at)
        box = _require(entry, "box", list, at)
        if len(box) != 4 or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in box):
            raise InputValidationError(f"{at}: 'box' must be [x0, y0, x1, y1] numbers")
        if not all(math.isfinite(float(v)) for v in box):
            raise InputValidationError(f"{at}: 'box' has a non-finite value")
        score = _require(entry, "score", float, at)
        if not (0.0 <= score <= 1.0):
            raise InputValidationError(f"{at}: 'score' {score} outside [0, 1]")
        label = _require(entry, "label", str, at)
        mask_rle = None
        if "mask_rle" in entry and entry["mask_rle"] is not None:
            m = entry["mask_rle"]
            if not isinstance(m, dict):
                raise InputValidationError(f"{at}: 'mask_rle' must be an object")
            _reject_unknown(m, {"size", "counts"}, f"{at}.mask_rle")
            size = _require(m, "size", list, f"{at}.mask_rle")
            counts = _require(m, "counts", list, f"{at}.mask_rle")
            if len(size) != 2 or not all(isinstance(v, int) and v > 0 for v in size):
                raise InputValidationError(
                    f"{at}.mask_rle: 'size' must be [height, width] positive integers"
                )
            if not all(isinstance(v, int) and not isinstance(v, bool) and v >= 0
                       for v in counts):
                raise InputValidationError(
                    f"{at}.mask_rle: 'counts' must be non-negative integers"
                )
            if sum(counts) != size[0] * size[1]:
                raise InputValidationError(
                    f"{at}.mask_rle: counts sum {sum(counts)} != size product "
                    f"{size[0] * size[1]}"
                )
            mask_rle = ((size[0], size[1]), tuple(counts))
        dets.append(Detection(box=tuple(float(v) for v in box), score=score,
                              label=label, mask_rle=mask_rle))
    return DetectionSet(image_id=image_id, detections=tuple(dets))


def save_detections(ds: DetectionSet, path: PathLike) -> None:
    entries = []
    for det in ds.detections:
        entry = {
            "box": [float(v) for v in det.box],
            "score": float(det.score),
            "label": det.label,
        }
        if det.mask_rle is not None:
            (h, w), counts = det.mask_rle
            entry["mask_rle"] = {"size": [h, w], "counts": list(counts)}
        entries.append(entry)
    with open(path, "w") as f:
        json.dump({"image_id": ds.image_id, "detections": entries}, f, indent=1)
        f.write("\n")


# ------------------------------------------------------------------ images

def load_image(path: PathLike) -> np.ndarray:
    """8-bit RGB PNG or PGM file to a (3, H, W) float array in [0, 1]."""
    try:
        with Image.open(path) as img:
            if img.mode == "I;16" or img.mode == "I":
                raise InputValidationError(f"{path}: 16-bit images not supported, use 8-bit")
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float64)
    except InputValidationError:
        raise
    except Exception as e:
        raise InputValidationError(f"{path}: cannot read image ({e})") from e
    return arr.transpose(2, 0, 1) / 255.0


def save_image(image: np.ndarray, path: PathLike) -> None:
    """(3, H, W) floats in [0, 1] to an 8-bit RGB PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise InputValidationError(f"expected (3, H, W), got shape {arr.shape}")
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(u8, mode="RGB").save(path)


def save_gray_image(values: np.ndarray, path: PathLike) -> None:
    """2-d array to an 8-bit grayscale PNG, scaled so the max maps to 255."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise InputValidationError(f"expected a 2-d array, got shape {arr.shape}")
    top = arr.max()
    scaled = arr / top if top > 0 else arr
    u8 = np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path)
