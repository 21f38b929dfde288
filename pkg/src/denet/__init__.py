"""Crowd counting by detection fusion: detected people are masked out of
the image and counted directly, a density network estimates the rest, and
the two totals are summed."""

from .autodiff import ConvSpec, Tensor, backward, zero_grad
from .config import RunConfig, apply_overrides, load_run_config, parse_run_config
from .density import DensityGrid, DotAnnotation, KernelPolicy, adaptive_sigma, generate_density_map
from .errors import (
    ConfigError,
    DenetError,
    InputValidationError,
    InvalidSpecError,
    ShapeError,
    TapeError,
    TrainingError,
)
from .evaluation import (
    CountReport,
    ImageResult,
    count_image,
    cross_validate,
    evaluate,
    mae_mse,
    make_folds,
)
from .fileio import (
    load_annotation,
    load_checkpoint,
    load_detections,
    load_grid,
    load_image,
    save_annotation,
    save_checkpoint,
    save_detections,
    save_grid,
    save_image,
)
from .fusion import (
    CountRecord,
    Detection,
    DetectionSet,
    FusionConfig,
    MaskedScene,
    apply_masks,
    filter_detections,
    fuse_count,
    mock_detect,
    rle_decode,
    rle_encode,
)
from .losses import CountContext, LossConfig, combined_loss, counting_loss, euclidean_loss
from .model import (
    EnetConfig,
    EnetModel,
    build_model,
    crop_output,
    encode,
    forward,
    load_parameters,
    pad_to_multiple,
)
from .synth import synth_scene
from .training import TrainConfig, TrainState, augment, train, train_step

__version__ = "0.1.0"

__all__ = [
    "ConvSpec",
    "Tensor",
    "backward",
    "zero_grad",
    "RunConfig",
    "apply_overrides",
    "load_run_config",
    "parse_run_config",
    "DensityGrid",
    "DotAnnotation",
    "KernelPolicy",
    "adaptive_sigma",
    "generate_density_map",
    "ConfigError",
    "DenetError",
    "InputValidationError",
    "InvalidSpecError",
    "ShapeError",
    "TapeError",
    "TrainingError",
    "CountReport",
    "ImageResult",
    "count_image",
    "cross_validate",
    "evaluate",
    "mae_mse",
    "make_folds",
    "load_annotation",
    "load_checkpoint",
    "load_detections",
    "load_grid",
    "load_image",
    "save_annotation",
    "save_checkpoint",
    "save_detections",
    "save_grid",
    "save_image",
    "CountRecord",
    "Detection",
    "DetectionSet",
    "FusionConfig",
    "MaskedScene",
    "apply_masks",
    "filter_detections",
    "fuse_count",
    "mock_detect",
    "rle_decode",
    "rle_encode",
    "CountContext",
    "LossConfig",
    "combined_loss",
    "counting_loss",
    "euclidean_loss",
    "EnetConfig",
    "EnetModel",
    "build_model",
    "crop_output",
    "encode",
    "forward",
    "load_parameters",
    "pad_to_multiple",
    "synth_scene",
    "TrainConfig",
    "TrainState",
    "augment",
    "train",
    "train_step",
]
