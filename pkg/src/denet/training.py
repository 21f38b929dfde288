"""Training loop: fourfold augmentation, adaptive-moment updates with bias
correction, a stepped learning-rate decay, and fully reproducible state.

Every image becomes four samples per epoch: itself, its horizontal mirror,
and two random 0.75-scale crops (re-drawn each epoch from the run's seeded
generator). Counting context for a crop keeps the detected count and
recounts the residual dots that remain inside the crop, which is all the
counting term can see.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .density import DensityGrid
from .errors import InputValidationError, TrainingError
from .fileio import load_checkpoint, save_checkpoint
from .fusion import MaskedScene
from .losses import CountContext, LossConfig, counting_loss, euclidean_loss
from .model import EnetModel, forward, pad_to_multiple

log = logging.getLogger(__name__)

CROP_SCALE = 0.75
MIN_CROP = 8
LOSS_CSV_HEADER = "step,epoch,lr,loss_e,loss_c,loss_total"


@dataclass(frozen=True)
class TrainConfig:
    lr_initial: float = 1e-4
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 20
    epochs: int = 1
    batch_size: int = 1
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr_initial <= 0:
            raise InputValidationError(f"lr_initial must be > 0, got {self.lr_initial}")
        if not (0.0 < self.lr_decay_factor <= 1.0):
            raise InputValidationError(
                f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}"
            )
        if self.lr_decay_every < 1:
            raise InputValidationError(
                f"lr_decay_every must be >= 1, got {self.lr_decay_every}"
            )
        if self.epochs < 0:
            raise InputValidationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise InputValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("adam_beta1", "adam_beta2"):
            if not (0.0 <= getattr(self, name) < 1.0):
                raise InputValidationError(f"{name} must be in [0, 1)")
        if self.adam_eps <= 0:
            raise InputValidationError(f"adam_eps must be > 0, got {self.adam_eps}")

    def lr_at(self, epoch: int) -> float:
        return self.lr_initial * self.lr_decay_factor ** (epoch // self.lr_decay_every)


@dataclass
class TrainSample:
    image: np.ndarray  # (3, h, w)
    gt: np.ndarray  # (h, w)
    ctx: CountContext
    kind: str  # identity | hflip | crop
    image_id: str = ""
    region_mask: Optional[np.ndarray] = None


@dataclass
class TrainState:
    step: int
    epoch: int
    moments: Dict[str, Tuple[np.ndarray, np.ndarray]]
    rng: np.random.Generator

    @staticmethod
    def init(model: EnetModel, seed: int) -> "TrainState":
        moments = {
            name: (np.zeros_like(p.data), np.zeros_like(p.data))
            for name, p in model.parameters.items()
        }
        return TrainState(step=0, epoch=0, moments=moments,
                          rng=np.random.default_rng(seed))


def save_state(state: TrainState, prefix: Union[str, Path]) -> None:
    """Two files: <prefix>.state.json with the scalars and generator state,
    <prefix>.moments.denet with the moment grids."""
    prefix = Path(prefix)
    doc = {
        "step": state.step,
        "epoch": state.epoch,
        "rng_state": state.rng.bit_generator.state,
    }
    with open(prefix.with_suffix(".state.json"), "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")
    flat = {}
    for name, (m, v) in state.moments.items():
        flat["m." + name] = m
        flat["v." + name] = v
    save_checkpoint(flat, prefix.with_suffix(".moments.denet"))


def load_state(prefix: Union[str, Path]) -> TrainState:
    prefix = Path(prefix)
    with open(prefix.with_suffix(".state.json")) as f:
        doc = json.load(f)
    flat = load_checkpoint(prefix.with_suffix(".moments.denet"))
    moments: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    for key, value in flat.items():
        tag, name = key.split(".", 1)
        m, v = moments.get(name, (None, None))
        if tag == "m":
            moments[name] = (value, v)
        else:
            moments[name] = (m, value)
    rng = np.random.default_rng()
    rng.bit_generator.state = doc["rng_state"]
    return TrainState(step=int(doc["step"]), epoch=int(doc["epoch"]),
                      moments=moments, rng=rng)


def _residual_in_rect(points: np.ndarray, x0: int, y0: int, cw: int, ch: int) -> int:
    if len(points) == 0:
        return 0
    x, y = points[:, 0], points[:, 1]
    return int(np.sum((x >= x0) & (x < x0 + cw) & (y >= y0) & (y < y0 + ch)))


def _pad_sample(image: np.ndarray, gt: np.ndarray,
                mask: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Image reflect-pads to the next multiple of 8; ground truth zero-pads
    so no density mass is invented; mask pads as background."""
    padded, crop = pad_to_multiple(image)
    if crop is None:
        return image, gt, mask
    ph = padded.shape[1] - gt.shape[0]
    pw = padded.shape[2] - gt.shape[1]
    gt = np.pad(gt, ((0, ph), (0, pw)))
    if mask is not None:
        mask = np.pad(mask, ((0, ph), (0, pw)))
    return padded, gt, mask


def augment(scene: MaskedScene, gt: DensityGrid,
            rng: np.random.Generator) -> List[TrainSample]:
    """Exactly four samples: identity, horizontal flip, two random crops."""
    image = scene.masked_image
    grid = gt.values
    ann = scene.residual_annotation
    ctx = CountContext(n_gt=ann.count + scene.n_d, n_detected=scene.n_d)
    image_id = ann.image_id

    samples = [
        TrainSample(image=image, gt=grid, ctx=ctx, kind="identity",
                    image_id=image_id, region_mask=scene.region_mask),
        TrainSample(
            image=np.flip(image, axis=-1).copy(),
            gt=np.flip(grid, axis=-1).copy(),
            ctx=ctx, kind="hflip", image_id=image_id,
            region_mask=np.flip(scene.region_mask, axis=-1).copy(),
        ),
    ]

    h, w = image.shape[1], image.shape[2]
    ch, cw = int(round(CROP_SCALE * h)), int(round(CROP_SCALE * w))
    if ch < MIN_CROP or cw < MIN_CROP:
        log.warning(
            "image %s is %dx%d, too small for %.2f-scale crops; "
            "duplicating the identity sample",
            image_id, w, h, CROP_SCALE,
        )
        for _ in range(2):
            samples.append(TrainSample(image=image, gt=grid, ctx=ctx, kind="identity",
                                       image_id=image_id, region_mask=scene.region_mask))
        return samples

    for _ in range(2):
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        sub_img = image[:, y0:y0 + ch, x0:x0 + cw]
        sub_gt = grid[y0:y0 + ch, x0:x0 + cw]
        sub_mask = scene.region_mask[y0:y0 + ch, x0:x0 + cw]
        residual = _residual_in_rect(ann.points, x0, y0, cw, ch)
        sub_img, sub_gt, sub_mask = _pad_sample(sub_img, sub_gt, sub_mask)
        samples.append(TrainSample(
            image=sub_img, gt=sub_gt,
            ctx=CountContext(n_gt=residual + scene.n_d, n_detected=scene.n_d),
            kind="crop", image_id=image_id, region_mask=sub_mask,
        ))
    return samples


def train_step(model: EnetModel, batch: Sequence[TrainSample], loss_cfg: LossConfig,
               state: TrainState, cfg: TrainConfig) -> Tuple[TrainState, Dict[str, float]]:
    """One optimizer update on the batch-mean combined loss."""
    if not batch:
        raise InputValidationError("train_step needs a non-empty batch")

    totals: List[Tensor] = []
    le_sum = lc_sum = 0.0
    for i, sample in enumerate(batch):
        pred = forward(model, Tensor(sample.image))
        le = euclidean_loss(pred, Tensor(sample.gt.reshape(pred.shape)))
        lc = counting_loss(pred, sample.ctx, loss_cfg)
        total = le if loss_cfg.alpha == 0.0 else ad.add(le, ad.scale(lc, loss_cfg.alpha))
        if not np.isfinite(total.item()):
            raise TrainingError(
                f"non-finite loss on batch item {i} "
                f"(image '{sample.image_id}', {sample.kind} sample)"
            )
        le_sum += le.item()
        lc_sum += lc.item()
        totals.append(total)

    batch_loss = totals[0]
    for t in totals[1:]:
        batch_loss = ad.add(batch_loss, t)
    batch_loss = ad.scale(batch_loss, 1.0 / len(batch))

    ad.backward(batch_loss)

    lr = cfg.lr_at(state.epoch)
    t = state.step + 1
    bias1 = 1.0 - cfg.adam_beta1 ** t
    bias2 = 1.0 - cfg.adam_beta2 ** t
    for name, p in model.parameters.items():
        g = p.grad
        m, v = state.moments[name]
        m *= cfg.adam_beta1
        m += (1.0 - cfg.adam_beta1) * g
        v *= cfg.adam_beta2
        v += (1.0 - cfg.adam_beta2) * g * g
        p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.adam_eps)
    ad.zero_grad(model.parameters.values())
    state.step = t

    n = len(batch)
    return state, {
        "lr": lr,
        "loss_e": le_sum / n,
        "loss_c": lc_sum / n,
        "loss_total": batch_loss.item(),
    }


Scene = Tuple[MaskedScene, DensityGrid]


def train(scenes: Sequence[Scene], model: EnetModel, loss_cfg: LossConfig,
          cfg: TrainConfig, checkpoint_path: Union[str, Path],
          loss_csv_path: Union[str, Path],
          state_prefix: Optional[Union[str, Path]] = None) -> TrainState:
    """Seeded epochs of shuffled augmented samples.

    The checkpoint is (re)written after every epoch, so interrupting between
    epochs loses at most one. ``epochs=0`` writes the untouched
    initialization.
    """
    if not scenes:
        raise InputValidationError("train needs a non-empty dataset")
    state = TrainState.init(model, cfg.seed)

    with open(loss_csv_path, "w") as csv:
        csv.write(LOSS_CSV_HEADER + "\n")
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            samples: List[TrainSample] = []
            for scene, gt in scenes:
                samples.extend(augment(scene, gt, state.rng))
            order = state.rng.permutation(len(samples))
            for start in range(0, len(order), cfg.batch_size):
                batch = [samples[i] for i in order[start:start + cfg.batch_size]]
                state, losses = train_step(model, batch, loss_cfg, state, cfg)
                csv.write(
                    f"{state.step},{epoch},{losses['lr']:.12g},"
                    f"{losses['loss_e']:.17g},{losses['loss_c']:.17g},"
                    f"{losses['loss_total']:.17g}\n"
                )
            save_checkpoint(model.parameters, checkpoint_path)
            if state_prefix is not None:
                save_state(state, state_prefix)

    save_checkpoint(model.parameters, checkpoint_path)
    if state_prefix is not None:
        save_state(state, state_prefix)
    return state
