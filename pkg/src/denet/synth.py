"""Synthetic crowd scenes for smoke tests and demos.

Each person is a small bright blob on a dim textured background, so blob
mass is the count signal a density estimator has to pick up.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np

from .density import DotAnnotation
from .errors import InputValidationError

BLOB_RADIUS = 2.2
BLOB_GAIN = 0.9
MARGIN = 3.0  # keep blob centers off the border
PLACEMENT_TRIES = 200  # per dot, before giving up on min_dist


def _place_dots(rng: np.random.Generator, height: int, width: int,
                n_dots: int, min_dist: float) -> np.ndarray:
    if n_dots == 0:
        return np.zeros((0, 2))
    if min_dist <= 0.0:
        return np.column_stack([
            rng.uniform(MARGIN, width - MARGIN, n_dots),
            rng.uniform(MARGIN, height - MARGIN, n_dots),
        ])
    placed: list = []
    for _ in range(n_dots):
        for _ in range(PLACEMENT_TRIES):
            cand = np.array([rng.uniform(MARGIN, width - MARGIN),
                             rng.uniform(MARGIN, height - MARGIN)])
            if not placed or np.min(
                np.hypot(*(np.asarray(placed) - cand).T)
            ) >= min_dist:
                placed.append(cand)
                break
        else:
            raise InputValidationError(
                f"could not place {n_dots} dots with min_dist {min_dist} "
                f"in {width}x{height}; lower the density"
            )
    return np.asarray(placed)


def synth_scene(image_id: str, height: int, width: int, n_dots: int,
                seed: int, min_dist: float = 0.0) -> Tuple[np.ndarray, DotAnnotation]:
    """One (3, H, W) image in [0, 1] plus the dots that generated it.

    ``min_dist`` enforces a minimum pairwise spacing between dots (people
    do not stand inside each other); placement is rejection sampling, so
    keep the demand well below the packing limit.
    """
    if height < 8 or width < 8:
        raise InputValidationError(
            f"synthetic scenes need at least 8x8 pixels, got {width}x{height}"
        )
    if n_dots < 0:
        raise InputValidationError(f"n_dots must be >= 0, got {n_dots}")
    rng = np.random.default_rng(seed)
    pts = _place_dots(rng, height, width, n_dots, min_dist)
    ann = DotAnnotation(image_id, width, height, pts).validate()

    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = 0.08 + 0.04 * rng.standard_normal((3, height, width))
    image = np.clip(base, 0.0, 1.0)
    tint = rng.uniform(0.7, 1.0, (n_dots, 3))
    for (x, y), t in zip(pts, tint):
        blob = BLOB_GAIN * np.exp(
            -((xx - x) ** 2 + (yy - y) ** 2) / (2.0 * BLOB_RADIUS ** 2)
        )
        image = image + t[:, None, None] * blob[None]
    return np.clip(image, 0.0, 1.0), ann
