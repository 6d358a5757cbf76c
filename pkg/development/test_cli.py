"""
命令行入口：子命令产物与退出码
"""
import json

import pytest

from errors import EXIT_DATA, EXIT_OK, EXIT_USAGE
from main import run
from storage import formats


@pytest.fixture
def config_file(tmp_path, tiny_config):
    path = tmp_path / "config.json"
    path.write_text(tiny_config.to_json(), encoding="utf-8")
    return path


def test_terrain_sensor_project_chain(tmp_path, config_file):
    field_path = tmp_path / "terrain" / "stairs.hfld"
    assert run(["--config", str(config_file), "terrain", "--kind", "stairs_up", "--seed", "5",
                "--out", str(field_path), "--preview", str(tmp_path / "terrain" / "stairs.pgm")]) == EXIT_OK
    field = formats.load_heightfield(field_path)
    assert field.terrain_kind.value == "stairs_up"
    assert (tmp_path / "terrain" / "run_config.json").exists()
    assert formats.read_pgm16(tmp_path / "terrain" / "stairs.pgm").max() == 65535

    sensor_dir = tmp_path / "sensor"
    assert run(["--config", str(config_file), "sensor", "--terrain", str(field_path),
                "--out", str(sensor_dir)]) == EXIT_OK
    for name in ("lidar.pcld", "lidar_raw.pgm", "lidar.pgm", "depth.pgm", "run_config.json"):
        assert (sensor_dir / name).exists(), name
    assert formats.read_pgm16(sensor_dir / "lidar.pgm").shape == (40, 276)
    assert formats.read_pgm16(sensor_dir / "depth.pgm").shape == (120, 160)

    projected = tmp_path / "project" / "lidar.pgm"
    assert run(["--config", str(config_file), "project", "--cloud", str(sensor_dir / "lidar.pcld"),
                "--out", str(projected)]) == EXIT_OK
    pixels = formats.read_pgm16(projected)
    assert pixels.shape == (40, 276) and (pixels > 0).any()


def test_bench_writes_report(tmp_path, config_file):
    out = tmp_path / "bench.json"
    assert run(["--config", str(config_file), "--reproducible", "bench", "--scan-count", "3",
                "--out", str(out)]) == EXIT_OK
    report = json.loads(out.read_text(encoding="utf-8"))
    assert report["scans"] == 3 and report["budget_ms"] == 10.0
    assert report["mean_ms"] <= report["max_ms"]


def test_eval_oracle(tmp_path, config_file, tiny_dataset):
    out = tmp_path / "eval"
    assert run(["--config", str(config_file), "eval", "--dataset", str(tiny_dataset.root), "--oracle",
                "--split", "val", "--out", str(out)]) == EXIT_OK
    assert formats.read_json(out / "report.json")["primary"] == "oracle_fused"


@pytest.mark.parametrize("argv", [
    ["terrain", "--seed", "1", "--out", "x.hfld"],
    ["terrain", "--kind", "volcano", "--seed", "1", "--out", "x.hfld"],
    ["bench", "--scan-count", "0"],
    ["no-such-command"],
])
def test_usage_errors(argv):
    assert run(argv) == EXIT_USAGE


def test_eval_without_sources_is_usage_error(tmp_path, config_file, tiny_dataset):
    assert run(["--config", str(config_file), "eval", "--dataset", str(tiny_dataset.root),
                "--out", str(tmp_path / "eval")]) == EXIT_USAGE


def test_bad_config_is_data_error(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"stage2": {"momentum": 0.9}}), encoding="utf-8")
    assert run(["--config", str(path), "bench", "--scan-count", "1"]) == EXIT_DATA


def test_corrupt_point_cloud_is_data_error(tmp_path, config_file):
    bogus = tmp_path / "bogus.pcld"
    bogus.write_bytes(b"not a container")
    assert run(["--config", str(config_file), "project", "--cloud", str(bogus),
                "--out", str(tmp_path / "out.pgm")]) == EXIT_DATA
