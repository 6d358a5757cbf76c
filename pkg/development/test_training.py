"""
两阶段训练（极小数据集与极小网络）
"""
import numpy as np
import pytest

from development.dev_config import DevTools, dev_config
from errors import ConfigError, DivergenceError, SplitLeakageError
from storage import formats
from training import (
    SequenceSet, check_batch_split, check_finite, collect_images, corrupt_images, evaluate_sequences,
    feedback_mode, flat_predictor_mae, load_autoencoder, load_eds_checkpoint, train_stage1, train_stage2,
)


@pytest.fixture(scope="module")
def stage1_run(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("stage1")
    return train_stage1(tiny_dataset, "lidar", DevTools.tiny_run_config(), out), out


@pytest.fixture(scope="module")
def stage2_run(tiny_dataset, stage1_run, tmp_path_factory):
    out = tmp_path_factory.mktemp("stage2")
    result = train_stage2(tiny_dataset, DevTools.tiny_run_config(), out,
                          pretrained={"lidar": stage1_run[0].checkpoint})
    return result, out


def test_feedback_schedule():
    config = DevTools.with_stage2(DevTools.tiny_run_config(epochs=4), warmup_epochs=2)
    assert [feedback_mode(config, e) for e in range(1, 5)] == \
        ["ground_truth", "ground_truth", "closed_loop", "closed_loop"]
    forced = DevTools.with_stage2(config, feedback="ground_truth")
    assert feedback_mode(forced, 4) == "ground_truth"


def test_check_helpers():
    check_batch_split(["ep00001"], {"ep00002"})
    with pytest.raises(SplitLeakageError):
        check_batch_split(["ep00001", "ep00002"], {"ep00002"})
    check_finite(0.5, "stage2", 1)
    with pytest.raises(DivergenceError):
        check_finite(float("nan"), "stage2", 1, 0)


def test_sequence_windows(tiny_dataset):
    data = SequenceSet.from_dataset(tiny_dataset, "train")
    assert data.steps == dev_config.TEST_STEPS
    assert data.windows(2)[:2] == [(0, 0), (0, 2)]
    assert len(data.windows(3)) == len(data.episode_ids)
    with pytest.raises(ConfigError):
        data.windows(dev_config.TEST_STEPS + 1)
    depth, lidar, states, targets, ids = data.batch(data.windows(2)[:3], 2)
    assert depth.shape == (3, 2, 120, 160) and lidar.shape == (3, 2, 40, 276)
    assert states.shape == (3, 2, 15) and targets.shape == (3, 2, 165)
    assert ids == [data.episode_ids[0], data.episode_ids[0], data.episode_ids[1]]
    assert flat_predictor_mae(data) >= 0.0


def test_depth_only_sequence_set_skips_lidar(tiny_dataset):
    data = SequenceSet.from_dataset(tiny_dataset, "val", ["depth"])
    assert data.lidar is None and data.depth is not None


def test_collect_and_corrupt_images(tiny_dataset):
    config = DevTools.tiny_run_config()
    values, valid = collect_images(tiny_dataset, "train", "lidar", limit=6, seed=1)
    assert values.shape == (6, 40, 276) and valid.any(axis=(1, 2)).all()
    a = corrupt_images(values, valid, "lidar", range(6), config)
    b = corrupt_images(values, valid, "lidar", range(6), config)
    assert np.array_equal(a, b)
    assert a.max() <= 1.0 + 1e-6
    with pytest.raises(ConfigError):
        collect_images(tiny_dataset, "train", "radar", limit=None, seed=1)


def test_stage1_writes_checkpoint_curves_and_report(stage1_run):
    result, out = stage1_run
    assert result.checkpoint.exists()
    assert len(result.history) == 3
    assert np.isfinite(result.best_val) and result.best_val <= result.initial_val
    for name in ("ae_lidar_loss.csv", "ae_lidar_loss.html", "ae_lidar_error_map.pgm",
                 "ae_lidar_report.json", "run_config.json"):
        assert (out / name).exists(), name
    report = formats.read_json(out / "ae_lidar_report.json")
    assert set(report["gates"]) == {"val_loss_improved_5x", "denoising_on_90pct"}
    autoencoder = load_autoencoder(result.checkpoint)
    assert autoencoder.modality == "lidar"


def test_stage2_trains_with_pretrained_encoder(stage2_run):
    result, out = stage2_run
    assert result.checkpoint.name == "eds_fused_seq2.edsw"
    assert [row["feedback"] for row in result.history] == ["closed_loop", "ground_truth", "closed_loop"]
    assert result.report["pretrained"] is True
    assert result.report["encoder_grad_norm_first_batch"] > 0.0
    assert set(result.report["gates"]) == {"beats_flat_by_30pct", "beats_epoch0_by_3x"}
    assert (out / "eds_fused_seq2_loss.csv").exists()

    model, header = load_eds_checkpoint(result.checkpoint)
    assert header["extra"]["sequence_length"] == 2
    assert header["extra"]["epoch"] == result.best_epoch
    assert model.config.modality_mode == "fused"


def test_closed_loop_evaluation_shapes(tiny_dataset, stage2_run):
    model, _ = load_eds_checkpoint(stage2_run[0].checkpoint)
    data = SequenceSet.from_dataset(tiny_dataset, "val")
    out = evaluate_sequences(model, data, length=3)
    assert out["predictions"].shape == (1, 3, 165)
    assert out["targets"].shape == (1, 3, 165)
    noisy = evaluate_sequences(model, data, length=2, feedback_noise=0.02, seed=4)
    again = evaluate_sequences(model, data, length=2, feedback_noise=0.02, seed=4)
    assert noisy["mae"] == again["mae"]


def test_stage2_rejects_bad_overrides(tiny_dataset, tmp_path):
    with pytest.raises(ConfigError):
        train_stage2(tiny_dataset, DevTools.tiny_run_config(), tmp_path, mode="radar_only")
    with pytest.raises(ConfigError):
        train_stage2(tiny_dataset, DevTools.tiny_run_config(), tmp_path, sequence_length=64)


@pytest.mark.slow
def test_depth_only_stage2_from_scratch(tiny_dataset, tmp_path):
    config = DevTools.with_stage2(DevTools.tiny_run_config(), use_pretrained=False)
    result = train_stage2(tiny_dataset, config, tmp_path, mode="depth_only")
    assert result.checkpoint.name == "eds_depth_only_seq2.edsw"
    assert result.report["pretrained"] is False
    model, _ = load_eds_checkpoint(result.checkpoint)
    assert "depth" in model.encoders and "lidar" not in model.encoders
