"""Layered configuration: precedence, unknown keys, coercion, echo."""

import pytest
import yaml

from robustmark.config import DEFAULTS, echo_config, parse_config
from robustmark.errors import ConfigError


def test_defaults_round_trip():
    cfg = parse_config()
    assert cfg == DEFAULTS
    assert cfg is not DEFAULTS  # deep copy, caller cannot mutate defaults


def test_file_overrides_defaults(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text("stage2:\n  psnr_floor: 36.0\n")
    cfg = parse_config(p)
    assert cfg["stage2"]["psnr_floor"] == 36.0
    assert cfg["stage1"]["tau1"] == DEFAULTS["stage1"]["tau1"]


def test_cli_overrides_file(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text("stage2:\n  psnr_floor: 36.0\n")
    cfg = parse_config(p, {"stage2.psnr_floor": "38"})
    assert cfg["stage2"]["psnr_floor"] == 38.0


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text("stage2:\n  psnr_flor: 36.0\n")
    with pytest.raises(ConfigError, match="psnr_flor"):
        parse_config(p)


def test_unknown_section_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config(None, {"nosuch.key": "1"})


def test_type_coercion_and_errors():
    cfg = parse_config(None, {"attacks.jpeg_q": "75"})
    assert cfg["attacks"]["jpeg_q"] == 75
    with pytest.raises(ConfigError):
        parse_config(None, {"attacks.jpeg_q": "75.5"})  # int key, float value
    with pytest.raises(ConfigError):
        parse_config(None, {"stage1.alpha_e": "fast"})


def test_echo_config(tmp_path):
    cfg = parse_config(None, {"eval.seed": "7"})
    out = echo_config(cfg, tmp_path / "run")
    assert out.name == "resolved_config.yaml"
    assert yaml.safe_load(out.read_text()) == cfg


def test_section_must_be_mapping(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text("stage2: 12\n")
    with pytest.raises(ConfigError):
        parse_config(p)
