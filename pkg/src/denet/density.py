"""Ground-truth density maps from head-point annotations.

Each annotated head contributes one unit of mass: a Gaussian bump centered
at the (real-valued) point, truncated at four standard deviations, clipped
to the image, and renormalized so that truncation never loses mass. The sum
of the finished grid therefore equals the number of points, which is what
makes the grid a count.

Coordinates are corner-origin: a point (x, y) lies in pixel
(row floor(y), col floor(x)), and kernels are evaluated at pixel centers
(col + 0.5, row + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InputValidationError

TRUNCATION_SIGMAS = 4.0


@dataclass
class DotAnnotation:
    """Head-center points for one image, in pixel coordinates."""

    image_id: str
    width: int
    height: int
    points: np.ndarray  # (N, 2) float64 columns (x, y); may be empty

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = np.zeros((0, 2))
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise InputValidationError(
                f"{self.image_id}: points must be an (N, 2) list, got shape {pts.shape}"
            )
        self.points = pts

    def validate(self) -> "DotAnnotation":
        if self.width < 1 or self.height < 1:
            raise InputValidationError(
                f"{self.image_id}: width/height must be positive, got "
                f"{self.width}x{self.height}"
            )
        for i, (x, y) in enumerate(self.points):
            if not (math.isfinite(x) and math.isfinite(y)):
                raise InputValidationError(
                    f"{self.image_id}: points[{i}] has non-finite coordinate ({x}, {y})"
                )
            if not (0.0 <= x < self.width and 0.0 <= y < self.height):
                raise InputValidationError(
                    f"{self.image_id}: points[{i}] = ({x}, {y}) outside "
                    f"[0, {self.width}) x [0, {self.height})"
                )
        return self

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class KernelPolicy:
    """How the per-point Gaussian width sigma is chosen.

    Fixed mode uses ``sigma_fixed`` for every point. Adaptive mode scales
    the mean distance to the nearest annotated neighbors, which tracks
    apparent head size in crowded scenes, and clamps to
    [sigma_min, sigma_max]. With fewer than two points adaptive mode falls
    back to ``sigma_fixed``.
    """

    mode: str = "fixed"  # "fixed" | "adaptive"
    sigma_fixed: float = 15.0
    beta: float = 0.3
    k_neighbors: int = 3
    sigma_min: float = 1.0
    sigma_max: float = 25.0

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive"):
            raise InputValidationError(f"kernel mode must be fixed|adaptive, got {self.mode!r}")
        if self.sigma_fixed <= 0:
            raise InputValidationError(f"sigma_fixed must be > 0, got {self.sigma_fixed}")
        if self.beta <= 0:
            raise InputValidationError(f"beta must be > 0, got {self.beta}")
        if self.k_neighbors < 1:
            raise InputValidationError(f"k_neighbors must be >= 1, got {self.k_neighbors}")
        if self.sigma_min > self.sigma_max:
            raise InputValidationError(
                f"sigma_min {self.sigma_min} > sigma_max {self.sigma_max}"
            )
        if self.sigma_min <= 0:
            raise InputValidationError(f"sigma_min must be > 0, got {self.sigma_min}")


@dataclass
class DensityGrid:
    """Non-negative H x W grid of persons-per-pixel; its sum is a count."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InputValidationError(f"density grid must be 2-d, got shape {self.values.shape}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def total(self) -> float:
        return float(self.values.sum())


def adaptive_sigma(points: np.ndarray, index: int, policy: KernelPolicy) -> float:
    """Sigma for one point: beta times the mean distance to its nearest
    neighbors (up to k, fewer if the set is small), clamped."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < 2:
        return policy.sigma_fixed
    k = min(policy.k_neighbors, n - 1)
    tree = cKDTree(points)
    # k+1 nearest include the point itself at distance 0
    dists, _ = tree.query(points[index], k=k + 1)
    mean_dist = float(np.mean(np.atleast_1d(dists)[1:]))
    return float(np.clip(policy.beta * mean_dist, policy.sigma_min, policy.sigma_max))


def _all_sigmas(points: np.ndarray, policy: KernelPolicy) -> np.ndarray:
    n = len(points)
    if policy.mode == "fixed" or n < 2:
        return np.full(n, policy.sigma_fixed)
    k = min(policy.k_neighbors, n - 1)
    tree = cKDTree(points)
    dists, _ = tree.query(points, k=k + 1)
    mean_dists = dists[:, 1:].mean(axis=1)
    return np.clip(policy.beta * mean_dists, policy.sigma_min, policy.sigma_max)


def generate_density_map(ann: DotAnnotation, policy: KernelPolicy) -> DensityGrid:
    """Sum of per-point unit-mass Gaussian bumps on the annotation's grid.

    Each bump is evaluated at pixel centers on a window of +-4 sigma around
    the point, clipped to the image, and renormalized to total exactly 1, so
    ``grid.total() == ann.count`` up to accumulation error.
    """
    ann.validate()
    h, w = ann.height, ann.width
    grid = np.zeros((h, w), dtype=np.float64)
    if ann.count == 0:
        return DensityGrid(grid)

    sigmas = _all_sigmas(ann.points, policy)
    for (x, y), sigma in zip(ann.points, sigmas):
        reach = TRUNCATION_SIGMAS * sigma
        r0 = max(0, int(math.floor(y - reach)))
        r1 = min(h - 1, int(math.ceil(y + reach)))
        c0 = max(0, int(math.floor(x - reach)))
        c1 = min(w - 1, int(math.ceil(x + reach)))
        rows = np.arange(r0, r1 + 1, dtype=np.float64) + 0.5
        cols = np.arange(c0, c1 + 1, dtype=np.float64) + 0.5
        bump = np.exp(
            -((rows[:, None] - y) ** 2 + (cols[None, :] - x) ** 2) / (2.0 * sigma * sigma)
        )
        grid[r0:r1 + 1, c0:c1 + 1] += bump / bump.sum()
    return DensityGrid(grid)
