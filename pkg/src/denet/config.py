"""Run configuration: one JSON document covering the model, losses, kernel
policy, detection fusion, and training loop, with strict key checking.

The top-level ``seed`` is the run seed. The training section deliberately
has no seed of its own; everything downstream derives from the one value so
a run is reproducible from a single number.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from .density import KernelPolicy
from .errors import ConfigError
from .fusion import FusionConfig
from .losses import LossConfig
from .model import EnetConfig
from .training import TrainConfig

SECTIONS = {
    "model": EnetConfig,
    "loss": LossConfig,
    "kernel": KernelPolicy,
    "fusion": FusionConfig,
    "train": TrainConfig,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: EnetConfig = EnetConfig()
    loss: LossConfig = LossConfig()
    kernel: KernelPolicy = KernelPolicy()
    fusion: FusionConfig = FusionConfig()
    train: TrainConfig = TrainConfig()

    def __post_init__(self):
        if self.train.seed != self.seed:
            object.__setattr__(self, "train",
                               dataclasses.replace(self.train, seed=self.seed))


def _build_section(name: str, cls, doc: Mapping[str, Any]):
    if not isinstance(doc, dict):
        raise ConfigError(f"config section '{name}' must be an object, got "
                          f"{type(doc).__name__}")
    known = {f.name for f in fields(cls)}
    if name == "train":
        known.discard("seed")  # derived from the top-level seed
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(
            f"config section '{name}' has unknown key(s) "
            f"{sorted(unknown)}; expected a subset of {sorted(known)}"
        )
    kwargs = dict(doc)
    if name == "model":
        # JSON has no tuples; coerce the nested lists the section expects
        if "decoder_channels" in kwargs:
            kwargs["decoder_channels"] = tuple(kwargs["decoder_channels"])
        if "dilated_stack" in kwargs:
            kwargs["dilated_stack"] = tuple(
                tuple(entry) for entry in kwargs["dilated_stack"]
            )
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"config section '{name}': {exc}") from exc


def parse_run_config(doc: Mapping[str, Any]) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be an object, got {type(doc).__name__}")
    unknown = set(doc) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(
            f"config has unknown top-level key(s) {sorted(unknown)}; "
            f"expected a subset of {sorted(SECTIONS) + ['seed']}"
        )
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError(f"config 'seed' must be an integer, got {seed!r}")
    kwargs: Dict[str, Any] = {"seed": seed}
    for name, cls in SECTIONS.items():
        if name in doc:
            kwargs[name] = _build_section(name, cls, doc[name])
    return RunConfig(**kwargs)


def load_run_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """Defaults when no path is given; otherwise a strict parse of the file."""
    if path is None:
        return RunConfig()
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return parse_run_config(doc)


def apply_overrides(cfg: RunConfig, **overrides: Any) -> RunConfig:
    """Point updates from the command line, dotted as section.field.

    ``seed`` (no dot) replaces the run seed. Values of None mean "not
    given" and are skipped.
    """
    sections: Dict[str, Dict[str, Any]] = {}
    seed = cfg.seed
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "seed":
            seed = value
            continue
        if "." not in key:
            raise ConfigError(f"override '{key}' is not of the form section.field")
        section, field = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"override names unknown section '{section}'")
        known = {f.name for f in fields(SECTIONS[section])}
        if field not in known or (section, field) == ("train", "seed"):
            raise ConfigError(
                f"override names unknown field '{field}' in section '{section}'"
            )
        sections.setdefault(section, {})[field] = value

    parts: Dict[str, Any] = {"seed": seed}
    for name in SECTIONS:
        current = getattr(cfg, name)
        if name in sections:
            current = dataclasses.replace(current, **sections[name])
        parts[name] = current
    return RunConfig(**parts)


def config_as_dict(cfg: RunConfig) -> Dict[str, Any]:
    """Fully resolved, JSON-ready view (used by run manifests)."""
    doc: Dict[str, Any] = {"seed": cfg.seed}
    for name in SECTIONS:
        doc[name] = dataclasses.asdict(getattr(cfg, name))
    doc["model"]["decoder_channels"] = list(doc["model"]["decoder_channels"])
    doc["model"]["dilated_stack"] = [list(e) for e in doc["model"]["dilated_stack"]]
    doc["train"].pop("seed")  # derived from the run seed; keep it replayable
    return doc
