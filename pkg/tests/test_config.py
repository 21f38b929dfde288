"""Run-configuration parsing: strict keys, typed sections, overrides."""

import json

import pytest

from denet.config import (
    RunConfig,
    apply_overrides,
    config_as_dict,
    load_run_config,
    parse_run_config,
)
from denet.errors import ConfigError, InputValidationError


def test_defaults_match_the_section_dataclasses():
    cfg = RunConfig()
    assert cfg.seed == 0
    assert cfg.model.base_channels == 32
    assert cfg.loss.alpha == 0.1
    assert cfg.kernel.sigma_fixed == 15.0
    assert cfg.fusion.score_threshold == 0.7
    assert cfg.train.lr_initial == 1e-4
    # the training seed always tracks the run seed
    assert cfg.train.seed == cfg.seed


def test_run_seed_propagates_to_training():
    cfg = RunConfig(seed=77)
    assert cfg.train.seed == 77


def test_parse_full_document():
    doc = {
        "seed": 5,
        "model": {"middle_blocks": 2, "base_channels": 8,
                  "decoder_channels": [32, 16, 8],
                  "dilated_stack": [[8, 2], [8, 2]]},
        "loss": {"alpha": 0.25},
        "kernel": {"mode": "adaptive", "beta": 0.4},
        "fusion": {"score_threshold": 0.5},
        "train": {"epochs": 3, "batch_size": 2},
    }
    cfg = parse_run_config(doc)
    assert cfg.seed == 5
    assert cfg.model.middle_blocks == 2
    assert cfg.model.decoder_channels == (32, 16, 8)
    assert cfg.model.dilated_stack == ((8, 2), (8, 2))
    assert cfg.loss.alpha == 0.25
    assert cfg.kernel.mode == "adaptive"
    assert cfg.train.epochs == 3
    assert cfg.train.seed == 5


def test_missing_sections_fall_back_to_defaults():
    cfg = parse_run_config({"seed": 1})
    assert cfg.loss.alpha == 0.1
    assert cfg.model.middle_blocks == 4


@pytest.mark.parametrize("doc,needle", [
    ({"sead": 1}, "sead"),
    ({"loss": {"alhpa": 0.1}}, "alhpa"),
    ({"model": {"kernel_size": 3}}, "kernel_size"),
    ({"train": {"seed": 3}}, "seed"),
    ({"train": {"momentum": 0.9}}, "momentum"),
])
def test_unknown_keys_are_named(doc, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_run_config(doc)


def test_section_must_be_an_object():
    with pytest.raises(ConfigError, match="'loss'"):
        parse_run_config({"loss": 0.1})


def test_root_must_be_an_object():
    with pytest.raises(ConfigError, match="root"):
        parse_run_config([1, 2, 3])


@pytest.mark.parametrize("seed", [True, 1.5, "7"])
def test_seed_must_be_a_plain_integer(seed):
    with pytest.raises(ConfigError, match="seed"):
        parse_run_config({"seed": seed})


def test_bad_section_values_surface_as_validation_errors():
    with pytest.raises(InputValidationError):
        parse_run_config({"loss": {"alpha": -1.0}})
    with pytest.raises(InputValidationError):
        parse_run_config({"train": {"epochs": -2}})


def test_load_without_a_path_gives_defaults():
    assert load_run_config(None) == RunConfig()


def test_load_names_the_file_on_bad_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="broken.json"):
        load_run_config(path)


def test_load_round_trip(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 3, "loss": {"alpha": 0.2}}))
    cfg = load_run_config(path)
    assert cfg.seed == 3 and cfg.loss.alpha == 0.2


# ------------------------------------------------------------- overrides

def test_overrides_replace_single_fields():
    cfg = apply_overrides(RunConfig(), **{"loss.alpha": 0.3, "seed": 9})
    assert cfg.loss.alpha == 0.3
    assert cfg.seed == 9
    assert cfg.train.seed == 9
    assert cfg.kernel == RunConfig().kernel


def test_overrides_skip_none():
    cfg = apply_overrides(RunConfig(), **{"loss.alpha": None})
    assert cfg == RunConfig()


@pytest.mark.parametrize("key", ["optimizer.lr", "loss.gamma", "alpha", "train.seed"])
def test_overrides_reject_unknown_targets(key):
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), **{key: 1})


def test_overridden_values_are_validated():
    with pytest.raises(InputValidationError):
        apply_overrides(RunConfig(), **{"train.batch_size": 0})


# ------------------------------------------------------------- manifest view

def test_config_as_dict_round_trips():
    cfg = apply_overrides(RunConfig(), **{"seed": 4, "kernel.mode": "adaptive",
                                          "train.epochs": 7})
    doc = config_as_dict(cfg)
    assert parse_run_config(doc) == cfg
    assert "seed" not in doc["train"]  # derived, lives at the top level
    json.dumps(doc)  # must be JSON-serializable as-is
