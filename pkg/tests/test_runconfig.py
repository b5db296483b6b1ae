"""JSON run configuration: parsing, overrides and round-trips."""

import pytest

from fluidseg.errors import ConfigError
from fluidseg.runconfig import (RunConfig, apply_override, parse_config,
                                save_config_file, load_config_file,
                                serialize_config)


def test_defaults_round_trip():
    cfg = RunConfig()
    again = parse_config(serialize_config(cfg))
    assert again == cfg


def test_partial_sections_keep_defaults():
    cfg = parse_config({"train": {"lr": 0.5}})
    assert cfg.train.lr == 0.5
    assert cfg.train.momentum == RunConfig().train.momentum
    assert cfg.scene == RunConfig().scene


def test_unknown_keys_fail_loudly():
    with pytest.raises(ConfigError):
        parse_config({"trian": {}})
    with pytest.raises(ConfigError):
        parse_config({"train": {"learning_rate": 0.1}})
    with pytest.raises(ConfigError):
        parse_config({"train": 3})
    with pytest.raises(ConfigError):
        parse_config([])


def test_lists_become_tuples():
    cfg = parse_config({"split": {"budgets": [2, 4]}})
    assert cfg.split.budgets == (2, 4)


def test_apply_override_coercion():
    cfg = RunConfig()
    apply_override(cfg, "train.lr", "0.005")
    assert cfg.train.lr == 0.005
    apply_override(cfg, "train.epochs", "7")
    assert cfg.train.epochs == 7
    apply_override(cfg, "split.budgets", "2,4,8")
    assert cfg.split.budgets == (2, 4, 8)
    apply_override(cfg, "train.regime", "mlds")
    assert cfg.train.regime == "mlds"


def test_apply_override_rejects_garbage():
    cfg = RunConfig()
    with pytest.raises(ConfigError):
        apply_override(cfg, "train", "1")  # no key part
    with pytest.raises(ConfigError):
        apply_override(cfg, "orbit.lr", "1")
    with pytest.raises(ConfigError):
        apply_override(cfg, "train.lr", "fast")
    with pytest.raises(ConfigError):
        apply_override(cfg, "train.warp", "1")


def test_config_file_round_trip(tmp_path):
    cfg = RunConfig()
    apply_override(cfg, "scene.height", "32")
    apply_override(cfg, "train.regime", "mean_taught")
    path = tmp_path / "cfg.json"
    save_config_file(cfg, path)
    assert load_config_file(path) == cfg
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config_file(bad)
