"""
运行配置文档：严格解析与跨字段校验
"""
import json

import pytest

from config import RunConfig, settings, write_resolved_config
from development.dev_config import DevTools
from errors import ConfigError


def test_defaults_are_valid():
    config = RunConfig()
    config.validate()
    assert config.episodes.split == (0.70, 0.15, 0.15)
    assert config.sensors.clip_min == 0.2 and config.sensors.clip_max == 3.0


def test_dict_round_trip_keeps_tuples(tiny_config):
    restored = RunConfig.from_dict(json.loads(tiny_config.to_json()))
    assert restored == tiny_config
    assert isinstance(restored.episodes.split, tuple)


@pytest.mark.parametrize("data", [
    {"unknown": 1},
    {"stage2": {"lr": 1e-3, "momentum": 0.9}},
    {"model": "fused"},
])
def test_unknown_or_malformed_keys_rejected(data):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(data)


@pytest.mark.parametrize("data", [
    {"model": {"modality_mode": "radar_only"}},
    {"stage2": {"feedback": "mixed"}},
    {"stage2": {"sequence_length": 65}},
    {"stage2": {"sequence_length": 0}},
    {"jobs": 0},
    {"episodes": {"split": [0.5, 0.3, 0.3]}},
])
def test_cross_field_validation(data):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(data)


def test_load_accepts_resolved_config(tmp_path, tiny_config):
    write_resolved_config(tiny_config, tmp_path, settings.VERSION)
    document = json.loads((tmp_path / "run_config.json").read_text(encoding="utf-8"))
    assert document["tool_version"] == settings.VERSION
    assert RunConfig.load(tmp_path / "run_config.json") == tiny_config


def test_load_partial_and_missing(tmp_path):
    path = tmp_path / "partial.json"
    path.write_text(json.dumps({"stage2": {"sequence_length": 8}}), encoding="utf-8")
    config = RunConfig.load(path)
    assert config.stage2.sequence_length == 8
    assert config.stage2.lr == RunConfig().stage2.lr
    assert RunConfig.load(None) == RunConfig()


def test_load_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        RunConfig.load(path)


def test_with_stage2_helper_revalidates():
    config = DevTools.with_stage2(DevTools.tiny_run_config(), sequence_length=99)
    with pytest.raises(ConfigError):
        config.validate()
