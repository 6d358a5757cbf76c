"""
二进制容器、检查点、PGM 与 CSV
"""
import struct

import numpy as np
import pandas as pd
import pytest

from development.dev_config import DevTools
from errors import FormatError, ShapeError
from network.eds_model import EdsModel
from network.optim import AdamW
from storage import formats
from tools.range_image import PointCloud, RangeImage
from tools.terrain import generate, sampled_spec
from tools.geometry import TerrainKind


def test_container_layout_is_little_endian(tmp_path):
    path = tmp_path / "x.pcld"
    formats.write_container(path, formats.POINTCLOUD_MAGIC, {"count": 0}, [{"a": np.arange(3, dtype=np.int64)}])
    data = path.read_bytes()
    assert data[:4] == b"PCLD"
    version, header_len = struct.unpack_from("<HI", data, 4)
    assert version == 1
    assert data[10:10 + header_len] == b'{"count": 0}'


def test_arrays_survive_bit_exact(tmp_path, rng):
    record = {
        "f4": rng.normal(size=(3, 4)).astype(np.float32),
        "f8": rng.normal(size=5),
        "mask": rng.random((2, 2)) < 0.5,
        "index": np.arange(-3, 3, dtype=np.int64),
    }
    path = tmp_path / "r.epis"
    formats.write_container(path, formats.EPISODE_MAGIC, {}, [record, record])
    header, records = formats.read_container(path, formats.EPISODE_MAGIC)
    assert header == {} and len(records) == 2
    for name, array in record.items():
        restored = records[1][name]
        assert restored.shape == array.shape
        assert np.array_equal(restored, array.astype(np.uint8) if array.dtype == bool else array)


def test_corrupt_containers_raise_format_error(tmp_path):
    path = tmp_path / "t.hfld"
    formats.save_heightfield(DevTools.flat_field(size=1.0, cell=0.1), path)
    with pytest.raises(FormatError):
        formats.read_container(path, formats.EPISODE_MAGIC)
    data = path.read_bytes()
    (tmp_path / "cut.hfld").write_bytes(data[:40 + 4 * 50])
    with pytest.raises(FormatError):
        formats.load_heightfield(tmp_path / "cut.hfld")
    bumped = bytearray(data)
    bumped[4] = 9
    (tmp_path / "v9.hfld").write_bytes(bytes(bumped))
    with pytest.raises(FormatError):
        formats.load_heightfield(tmp_path / "v9.hfld")
    with pytest.raises(FormatError):
        formats.encode_arrays({"c": np.zeros(2, dtype=np.complex64)})


def test_heightfield_round_trip(tmp_path):
    spec = sampled_spec(TerrainKind.STEPS, 3, footprint=4.0)
    field = generate(spec)
    formats.save_heightfield(field, tmp_path / "f.hfld", spec.to_dict())
    loaded = formats.load_heightfield(tmp_path / "f.hfld")
    assert np.array_equal(loaded.elevations, field.elevations.astype(np.float32))
    assert loaded.terrain_kind == TerrainKind.STEPS
    assert loaded.origin_xy == field.origin_xy
    assert loaded.cell_size == field.cell_size


def test_heightfield_fixed_byte_layout(tmp_path):
    field = DevTools.ramp_field(size=1.0, grade=0.1, cell=0.1)
    path = tmp_path / "ramp.hfld"
    formats.save_heightfield(field, path)
    data = path.read_bytes()
    assert data[:4] == b"HFLD"
    assert struct.unpack_from("<I", data, 4) == (1,)
    assert struct.unpack_from("<ddd", data, 8) == (-0.5, -0.5, 0.1)
    assert struct.unpack_from("<II", data, 32) == (10, 10)
    payload = np.frombuffer(data, dtype="<f4", count=100, offset=40).reshape(10, 10)
    assert np.array_equal(payload, field.elevations.astype(np.float32))
    # 行主序：第二个值是 (i=0, j=1)，与 (0, 0) 同在 x 最小的一行
    assert payload[0, 1] == payload[0, 0] and payload[1, 0] > payload[0, 0]

    # 只有定长部分、没有元数据块的文件同样可读
    bare = tmp_path / "bare.hfld"
    bare.write_bytes(data[:40 + 100 * 4])
    loaded = formats.load_heightfield(bare)
    assert loaded.terrain_kind == TerrainKind.FLAT
    assert np.array_equal(loaded.elevations, payload)


def test_point_cloud_round_trip(tmp_path):
    cloud = PointCloud(np.array([[1.0, 2.0, 3.0], [0.5, -0.5, 0.25]]), [0, 1], [10, 20])
    formats.save_point_cloud(cloud, tmp_path / "c.pcld")
    loaded = formats.load_point_cloud(tmp_path / "c.pcld")
    assert np.allclose(loaded.points, cloud.points)
    assert loaded.rings.tolist() == [0, 1] and loaded.columns.tolist() == [10, 20]


def test_checkpoint_restores_parameters_and_optimizer(tmp_path, rng):
    model = EdsModel(DevTools.small_model_config())
    for param in model.parameters():
        param.grad[...] = rng.normal(size=param.shape)
    AdamW(model.parameters(), lr=1e-3).step()
    path = tmp_path / "m.edsw"
    formats.save_checkpoint(path, model.named_parameters(), {"model": {}}, include_optimizer=True,
                            extra={"epoch": 4})
    header, tensors = formats.load_checkpoint(path)
    assert header["extra"]["epoch"] == 4
    fresh = EdsModel(DevTools.small_model_config(seed=1))
    formats.restore_parameters(fresh, tensors, header)
    for (name, a), (_, b) in zip(model.named_parameters(), fresh.named_parameters()):
        assert np.array_equal(a.value, b.value), name
        assert np.array_equal(a.m, b.m) and b.step == 1
    with pytest.raises(ShapeError):
        formats.restore_parameters(EdsModel(DevTools.small_model_config("depth_only")), tensors, header)


def test_range_pgm_mapping(tmp_path):
    image = RangeImage(np.array([[0.2, 3.0, 1.6, 0.0]]), np.array([[True, True, True, False]]))
    pixels = formats.range_to_pgm(image)
    assert pixels.tolist() == [[1, 65535, 32768, 0]]
    formats.write_range_pgm(tmp_path / "r.pgm", image)
    assert (tmp_path / "r.pgm").read_bytes().startswith(b"P5\n4 1\n65535\n")
    assert formats.read_pgm16(tmp_path / "r.pgm").tolist() == pixels.tolist()


def test_preview_pgm_spans_full_scale(tmp_path):
    field = generate(sampled_spec(TerrainKind.ROUGH, 8, footprint=4.0))
    formats.write_preview_pgm(tmp_path / "p.pgm", field)
    pixels = formats.read_pgm16(tmp_path / "p.pgm")
    assert pixels.shape == (field.width, field.length)
    assert pixels.min() == 0 and pixels.max() == 65535
    formats.write_preview_pgm(tmp_path / "flat.pgm", DevTools.flat_field(size=1.0, cell=0.1))
    assert formats.read_pgm16(tmp_path / "flat.pgm").max() == 0


def test_csv_writers(tmp_path):
    formats.write_grid_csv(tmp_path / "g.csv", np.arange(6, dtype=float).reshape(2, 3))
    grid = pd.read_csv(tmp_path / "g.csv", header=None).to_numpy()
    assert grid.shape == (2, 3) and grid[1, 2] == 5.0
    formats.write_table_csv(tmp_path / "t.csv", [{"source": "a", "mae_cm": 1.5}])
    table = pd.read_csv(tmp_path / "t.csv")
    assert table.columns.tolist() == ["source", "mae_cm"]


def test_json_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{not json", encoding="utf-8")
    with pytest.raises(FormatError):
        formats.read_json(tmp_path / "bad.json")
