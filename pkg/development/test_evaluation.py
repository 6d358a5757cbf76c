"""
评估报告：划分隔离、输出文件、趋势检查
"""
import copy

import numpy as np
import pandas as pd
import pytest

from data_pipeline import Dataset
from development.dev_config import DevTools
from errors import ConfigError, DataValidationError, SplitLeakageError
from evaluation import ORACLE_MODES, SourceResult, check_split_isolation, evaluate, per_terrain_mae, trend_gates
from training import train_stage2

REPORT_KEYS = {
    "split", "episodes", "primary", "overall_mae_cm", "per_terrain_mae_cm", "flat_predictor_mae_cm",
    "sources", "noise_robustness", "stair_profile", "spatial_error_map", "single_modality_baselines", "gates",
}


@pytest.fixture(scope="module")
def checkpoint(tiny_dataset, tmp_path_factory):
    config = DevTools.with_stage2(DevTools.tiny_run_config(epochs=1), use_pretrained=False)
    return train_stage2(tiny_dataset, config, tmp_path_factory.mktemp("eds")).checkpoint


def _result(mode, length, mae, kind="checkpoint"):
    targets = np.zeros((2, 3, 165))
    return SourceResult(f"{mode}_{length}", kind, mode, length, np.full_like(targets, mae), targets)


def test_split_isolation(tiny_dataset):
    check_split_isolation(tiny_dataset, "test")
    for split in ("train", "holdout"):
        with pytest.raises(ConfigError):
            check_split_isolation(tiny_dataset, split)

    leaky = copy.copy(tiny_dataset)
    leaky.manifest = copy.deepcopy(tiny_dataset.manifest)
    leaky.manifest.splits["train"].append(tiny_dataset.episode_ids("test")[0])
    with pytest.raises(SplitLeakageError):
        check_split_isolation(leaky, "test")


def test_evaluate_needs_a_source(tiny_dataset, tiny_config, tmp_path):
    with pytest.raises(ConfigError):
        evaluate(tiny_dataset, tiny_config, tmp_path)


def test_oracle_only_evaluation_keeps_episode_cache_empty(tiny_dataset, tiny_config, tmp_path):
    fresh = Dataset(tiny_dataset.root)
    evaluate(fresh, tiny_config, tmp_path, oracle=True, split="test")
    assert fresh._cache == {}
    test_id = fresh.episode_ids("test")[0]
    assert fresh.terrain_kind(test_id) == fresh.episode(test_id, cache=False).terrain_kind
    assert fresh._cache == {}


def test_oracle_only_report(tiny_dataset, tiny_config, tmp_path):
    report = evaluate(tiny_dataset, tiny_config, tmp_path, oracle=True, split="val", jobs=2)
    assert set(report) == REPORT_KEYS
    assert report["primary"] == "oracle_fused"
    assert report["episodes"] == 1
    assert report["noise_robustness"] == []
    assert [row["source"] for row in report["sources"]] == \
        [f"oracle_{m}" for m in ORACLE_MODES] + ["flat_predictor"]
    assert report["spatial_error_map"]["nx"] * report["spatial_error_map"]["ny"] == 165
    assert not (tmp_path / "noise_robustness.csv").exists()
    for name in ("spatial_error_map.csv", "spatial_error_map.pgm", "spatial_error_map.html",
                 "modality_table.csv", "report.json", "run_config.json"):
        assert (tmp_path / name).exists(), name


def test_checkpoint_report_is_reproducible(tiny_dataset, tiny_config, checkpoint, tmp_path):
    first = evaluate(tiny_dataset, tiny_config, tmp_path / "a", checkpoints=[checkpoint], oracle=True)
    evaluate(tiny_dataset, tiny_config, tmp_path / "b", checkpoints=[checkpoint], oracle=True)
    assert first["split"] == "test"
    assert first["primary"] == checkpoint.stem
    assert len(first["noise_robustness"]) == len(tiny_config.evaluation.feedback_noise_cm)
    assert all(v in (True, False, None) for v in first["gates"].values())
    assert first["gates"]["spatial_map_finite"] is True
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    grid = pd.read_csv(tmp_path / "a" / "spatial_error_map.csv", header=None).to_numpy()
    assert grid.shape == (first["spatial_error_map"]["nx"], first["spatial_error_map"]["ny"])


def test_per_terrain_mae_skips_missing_kinds():
    result = _result("fused", 8, 0.0)
    result.predictions[1] += 0.04
    table = per_terrain_mae(result, ["flat", "stairs_up"])
    assert table == pytest.approx({"flat": 0.0, "stairs_up": 0.04})


def test_trend_gates():
    results = [_result("fused", 8, 0.02), _result("depth_only", 8, 0.03), _result("lidar_only", 8, 0.025),
               _result("fused", 32, 0.018)]
    gates = trend_gates(results, results[0], {"flat": 0.01, "stairs_up": 0.03}, np.zeros((15, 11)), 0.05)
    assert gates == {
        "fused_not_worse_than_single": True,
        "seq32_not_worse_than_seq8": True,
        "stairs_not_easier_than_flat": True,
        "spatial_map_finite": True,
    }

    lone = [_result("fused", 8, 0.02)]
    gates = trend_gates(lone, lone[0], {"flat": 0.01}, np.full((15, 11), np.nan), 0.05)
    assert gates["fused_not_worse_than_single"] is None
    assert gates["seq32_not_worse_than_seq8"] is None
    assert gates["stairs_not_easier_than_flat"] is None
    assert gates["spatial_map_finite"] is False


def test_terrain_kind_rejects_unknown_episode(tiny_dataset):
    with pytest.raises(DataValidationError):
        tiny_dataset.terrain_kind("ep99999")
