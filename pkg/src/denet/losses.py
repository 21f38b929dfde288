"""Training losses built on the autodiff engine.

Two terms. The pixel term is a mean over images of the summed squared
difference between predicted and target grids. The count term compares the
predicted grid's total against the number of people left after detections
are removed, normalized by that remainder so the penalty reads as a relative
error; a floor on the denominator keeps the fully-detected case finite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

from . import autodiff as ad
from .autodiff import Tensor
from .density import DensityGrid
from .errors import InputValidationError, ShapeError


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1
    denom_floor: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise InputValidationError(f"alpha must be >= 0, got {self.alpha}")
        if self.denom_floor <= 0:
            raise InputValidationError(f"denom_floor must be > 0, got {self.denom_floor}")


@dataclass(frozen=True)
class CountContext:
    """Per-image count bookkeeping: total annotated heads and how many of
    them were already accounted for by accepted detections."""

    n_gt: int
    n_detected: int

    def __post_init__(self):
        if self.n_gt < 0 or self.n_detected < 0:
            raise InputValidationError(
                f"counts must be non-negative, got n_gt={self.n_gt} n_detected={self.n_detected}"
            )

    @property
    def residual(self) -> int:
        return self.n_gt - self.n_detected


Target = Union[Tensor, DensityGrid]


def _as_target(target: Target, pred: Tensor) -> Tensor:
    if isinstance(target, DensityGrid):
        vals = target.values
        if (1,) + vals.shape == pred.shape:  # (H, W) grid against a (1, H, W) map
            vals = vals.reshape(pred.shape)
        target = Tensor(vals)
    if target.shape != pred.shape:
        raise ShapeError(
            f"prediction shape {pred.shape} does not match target shape {target.shape}"
        )
    return target


def euclidean_loss(pred: Tensor, target: Target) -> Tensor:
    """Per-pixel mean of the squared difference: (1/N) sum((pred - gt)^2),
    N the pixel count of the grid."""
    tgt = _as_target(target, pred)
    diff = ad.sub(pred, tgt)
    return ad.scale(ad.sum_all(ad.square(diff)), 1.0 / pred.data.size)


def counting_loss(pred: Tensor, ctx: CountContext, config: LossConfig) -> Tensor:
    """Squared relative count error of the estimated total.

    ((n_gt - n_detected - sum(pred)) / d)^2 with d = max(|n_gt - n_detected + 1|,
    denom_floor). The +1 keeps the scale sane when nearly everyone was
    detected, and the floor handles the n_detected == n_gt + 1 corner where
    the raw denominator would vanish.
    """
    d = max(abs(ctx.residual + 1), config.denom_floor)
    # (residual - sum(pred)) / d, then squared
    est = ad.sum_all(pred)
    num = ad.add_const(ad.scale(est, -1.0), float(ctx.residual))
    return ad.square(ad.scale(num, 1.0 / d))


def combined_loss(
    pred: Tensor, target: Target, ctx: CountContext, config: LossConfig
) -> Tensor:
    """euclidean + alpha * counting, as one scalar node on the same tape."""
    l_e = euclidean_loss(pred, target)
    if config.alpha == 0.0:
        return l_e
    l_c = counting_loss(pred, ctx, config)
    return ad.add(l_e, ad.scale(l_c, config.alpha))
