"""Encoder-decoder density network.

The encoder is a trimmed Xception-style column: a stride-2 stem conv, two
downsampling residual blocks built from separable convs with max-pool and a
1x1 strided skip, then a configurable run of stride-1 pre-activation
residual blocks. Total stride is 8, which the decoder undoes with three
conv + transposed-conv stages (filters 7x7, 5x5, 3x3; each transposed conv
doubles both extents exactly). A short stack of dilation-2 convs widens the
receptive field at full resolution before a 1x1 head and a final ReLU, so
the output is a non-negative single-channel grid the same size as the input.

All parameters live in ``EnetModel.parameters``, an insertion-ordered dict
whose order is the checkpoint order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ConvSpec, Tensor
from .errors import InputValidationError, ShapeError

STRIDE_TOTAL = 8
DECODER_KERNELS = (7, 5, 3)


@dataclass(frozen=True)
class EnetConfig:
    middle_blocks: int = 4
    base_channels: int = 32
    decoder_channels: Tuple[int, ...] = (128, 64, 32)
    dilated_stack: Tuple[Tuple[int, int], ...] = ((32, 2), (32, 2), (32, 2))

    def __post_init__(self):
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        object.__setattr__(
            self, "dilated_stack", tuple((int(c), int(d)) for c, d in self.dilated_stack)
        )
        if self.middle_blocks < 1:
            raise InputValidationError(
                f"middle_blocks must be a positive integer, got {self.middle_blocks}"
            )
        if self.base_channels < 1:
            raise InputValidationError(
                f"base_channels must be a positive integer, got {self.base_channels}"
            )
        if len(self.decoder_channels) != 3:
            raise InputValidationError(
                "decoder_channels must list exactly 3 stages (the three transposed-conv "
                f"doublings are fixed), got {len(self.decoder_channels)}"
            )
        if any(c < 1 for c in self.decoder_channels):
            raise InputValidationError(
                f"decoder_channels must be positive, got {self.decoder_channels}"
            )
        if not self.dilated_stack:
            raise InputValidationError("dilated_stack must have at least one layer")
        for c, d in self.dilated_stack:
            if c < 1 or d < 1:
                raise InputValidationError(
                    f"dilated_stack entries must be (channels >= 1, dilation >= 1), got ({c}, {d})"
                )


@dataclass
class EnetModel:
    config: EnetConfig
    parameters: Dict[str, Tensor] = field(default_factory=dict)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters.values())


def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _Builder:
    """Draws parameters in a fixed order so (config, seed) pins every value."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: Dict[str, Tensor] = {}

    def conv(self, name: str, c_in: int, c_out: int, k: int, *, bias_nonneg: bool = False) -> None:
        fan_in = c_in * k * k
        self.params[name + ".w"] = Tensor(
            _uniform(self.rng, (c_out, c_in, k, k), fan_in), requires_grad=True
        )
        bias = _uniform(self.rng, (c_out,), fan_in)
        if bias_nonneg:
            # the half-interval [0, 1/sqrt(fan_in)): keeps the layer after a
            # final ReLU in its linear region at the start instead of
            # gambling on the sign of one scalar
            bias = np.abs(bias)
        self.params[name + ".b"] = Tensor(bias, requires_grad=True)

    def sepconv(self, name: str, c_in: int, c_out: int, k: int = 3) -> None:
        self.params[name + ".dw"] = Tensor(
            _uniform(self.rng, (c_in, k, k), k * k), requires_grad=True
        )
        self.params[name + ".pw"] = Tensor(
            _uniform(self.rng, (c_out, c_in, 1, 1), c_in), requires_grad=True
        )
        self.params[name + ".b"] = Tensor(
            _uniform(self.rng, (c_out,), c_in), requires_grad=True
        )

    def tconv(self, name: str, c_in: int, c_out: int, k: int = 4) -> None:
        fan_in = c_in * k * k
        self.params[name + ".w"] = Tensor(
            _uniform(self.rng, (c_in, c_out, k, k), fan_in), requires_grad=True
        )
        self.params[name + ".b"] = Tensor(
            _uniform(self.rng, (c_out,), fan_in), requires_grad=True
        )


def build_model(config: EnetConfig, seed: int) -> EnetModel:
    """Allocate and initialize every parameter from one seeded generator.

    Values are fan-in-scaled uniform, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    """
    b = config.base_channels
    bld = _Builder(seed)

    bld.conv("stem", 3, b, 3)
    widths = (b, 2 * b, 4 * b)
    for i in range(2):
        c_in, c_out = widths[i], widths[i + 1]
        bld.conv(f"entry{i}.skip", c_in, c_out, 1)
        bld.sepconv(f"entry{i}.sep0", c_in, c_out)
        bld.sepconv(f"entry{i}.sep1", c_out, c_out)
    for i in range(config.middle_blocks):
        for j in range(3):
            bld.sepconv(f"middle{i}.sep{j}", 4 * b, 4 * b)

    c_prev = 4 * b
    for i, (k, c_out) in enumerate(zip(DECODER_KERNELS, config.decoder_channels)):
        bld.conv(f"dec{i}.conv", c_prev, c_out, k)
        bld.tconv(f"dec{i}.up", c_out, c_out)
        c_prev = c_out
    for i, (c_out, _dil) in enumerate(config.dilated_stack):
        bld.conv(f"dil{i}", c_prev, c_out, 3)
        c_prev = c_out
    bld.conv("head", c_prev, 1, 1, bias_nonneg=True)

    return EnetModel(config=config, parameters=bld.params)


def _conv(model: EnetModel, x: Tensor, name: str, k: int, *, stride=1, dilation=1,
          padding=None) -> Tensor:
    w = model.parameters[name + ".w"]
    if padding is None:
        padding = (dilation * (k - 1)) // 2
    spec = ConvSpec(
        kernel_h=k, kernel_w=k, stride=stride, dilation=dilation, padding=padding,
        channels_in=w.data.shape[1], channels_out=w.data.shape[0],
    )
    return ad.conv2d(x, w, model.parameters[name + ".b"], spec)


def _sepconv(model: EnetModel, x: Tensor, name: str) -> Tensor:
    dw = model.parameters[name + ".dw"]
    pw = model.parameters[name + ".pw"]
    spec = ConvSpec(
        kernel_h=3, kernel_w=3, stride=1, dilation=1, padding=1,
        channels_in=dw.data.shape[0], channels_out=pw.data.shape[0],
        depthwise_separable=True,
    )
    return ad.separable_conv2d(x, dw, pw, model.parameters[name + ".b"], spec)


def encode(model: EnetModel, image: Tensor) -> Tensor:
    """Stride-8 feature column: (3, H, W) -> (4 * base, H/8, W/8)."""
    _check_input(image)
    x = ad.relu(_conv(model, image, "stem", 3, stride=2))
    for i in range(2):
        skip = _conv(model, x, f"entry{i}.skip", 1, stride=2, padding=0)
        y = _sepconv(model, x, f"entry{i}.sep0")
        y = _sepconv(model, ad.relu(y), f"entry{i}.sep1")
        y = ad.max_pool2d(y, 2, stride=2)
        x = ad.add(y, skip)
    for i in range(model.config.middle_blocks):
        y = x
        for j in range(3):
            y = _sepconv(model, ad.relu(y), f"middle{i}.sep{j}")
        x = ad.add(x, y)
    return x


def forward(model: EnetModel, image: Tensor) -> Tensor:
    """(3, H, W) image in [0, 1] -> non-negative (1, H, W) density estimate.

    H and W must be divisible by 8; arbitrary sizes go through
    pad_to_multiple / crop_output around this call.
    """
    x = encode(model, image)
    for i, k in enumerate(DECODER_KERNELS):
        x = ad.relu(_conv(model, x, f"dec{i}.conv", k))
        w = model.parameters[f"dec{i}.up.w"]
        x = ad.relu(ad.transposed_conv2d(x, w, model.parameters[f"dec{i}.up.b"], stride=2))
    for i, (_c, dil) in enumerate(model.config.dilated_stack):
        x = ad.relu(_conv(model, x, f"dil{i}", 3, dilation=dil))
    x = _conv(model, x, "head", 1, padding=0)
    return ad.relu(x)


def _check_input(image: Tensor) -> None:
    shape = image.data.shape
    if len(shape) != 3 or shape[0] != 3:
        raise ShapeError(f"expected a (3, H, W) image tensor, got shape {shape}")
    _, h, w = shape
    if h % STRIDE_TOTAL or w % STRIDE_TOTAL:
        raise ShapeError(
            f"input extents ({h}, {w}) must be divisible by {STRIDE_TOTAL}; "
            "pad with pad_to_multiple and crop the output with crop_output"
        )


CropRecord = Optional[Tuple[int, int]]


def pad_to_multiple(image: np.ndarray, multiple: int = STRIDE_TOTAL) -> Tuple[np.ndarray, CropRecord]:
    """Reflect-pad the bottom/right of a (..., H, W) array up to the next
    multiple. Returns (padded, crop record); the record is None when the
    array already conforms."""
    if multiple < 1:
        raise InputValidationError(f"multiple must be >= 1, got {multiple}")
    h, w = image.shape[-2], image.shape[-1]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return image, None
    pad = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(image, pad, mode="reflect"), (h, w)


def crop_output(output: Tensor, crop: CropRecord) -> Tensor:
    """Undo pad_to_multiple on a network output. Identity when crop is None.

    The crop is a plain slice of the data, detached from the tape; it exists
    for inference on odd-sized images, not for training.
    """
    if crop is None:
        return output
    h, w = crop
    return Tensor(output.data[..., :h, :w].copy())


def load_parameters(model: EnetModel, params: Mapping[str, np.ndarray]) -> None:
    """Overwrite the model's weights in place from a name -> array mapping,
    refusing on any missing, extra, or misshapen entry."""
    missing = set(model.parameters) - set(params)
    extra = set(params) - set(model.parameters)
    if missing or extra:
        raise InputValidationError(
            f"checkpoint does not match the model: missing {sorted(missing)}, "
            f"unexpected {sorted(extra)}"
        )
    for name, p in model.parameters.items():
        value = np.asarray(params[name], dtype=np.float64)
        if value.shape != p.data.shape:
            raise InputValidationError(
                f"checkpoint parameter '{name}' has shape {value.shape}, "
                f"model expects {p.data.shape}"
            )
        p.data[...] = value
