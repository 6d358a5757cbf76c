"""
球面投影与距离图像预处理
"""
import numpy as np
import pytest

from development.dev_config import DevTools
from errors import DataValidationError, EmptyInputError
from tools.geometry import Pose
from tools.range_image import (
    PointCloud, RangeImage, clip_ranges, fill_gaps_rowwise, fill_nearest, median_filter_3x3,
    preprocess, preprocess_with_mask, rasterize, spherical_project, to_normalized, unproject,
)
from tools.sensors import LidarModel, lidar_scan


def _image(values, valid=None):
    values = np.asarray(values, dtype=float)
    return RangeImage(values, values > 0 if valid is None else valid)


def test_spherical_projection_conventions():
    coord = spherical_project(np.array([1.0, 0.0, 0.0]))
    assert (coord.range, coord.azimuth, coord.inclination) == (1.0, 0.0, 0.0)
    assert spherical_project(np.array([-1.0, 0.0, 0.0])).azimuth == pytest.approx(np.pi)
    assert spherical_project(np.array([0.0, 0.0, 2.0])).inclination == pytest.approx(np.pi / 2)
    with pytest.raises(DataValidationError):
        spherical_project(np.zeros(3))


def test_rasterize_bins_and_collisions():
    cloud = PointCloud.from_points([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    image = rasterize(cloud)
    assert image.shape == (40, 276)
    assert image.valid.sum() == 1
    assert image.values[35, 138] == pytest.approx(1.0)


def test_rear_point_lands_on_seam():
    image = rasterize(PointCloud.from_points([[-1.0, 1e-9, 0.0]]))
    assert image.valid[:, 0].any()


def test_clip_ranges():
    image = clip_ranges(_image([[0.1, 1.0, 5.0, 0.0]]))
    assert image.valid.tolist() == [[False, True, True, False]]
    assert image.values.tolist() == [[0.0, 1.0, 3.0, 0.0]]


def test_fill_gaps_rowwise_interpolates_short_interior_gaps():
    image = fill_gaps_rowwise(_image([[1.0, 0.0, 0.0, 4.0, 0.0],
                                      [1.0, 0.0, 0.0, 0.0, 0.0]]), max_gap=2)
    assert np.allclose(image.values[0, :4], [1.0, 2.0, 3.0, 4.0])
    # 触及边界的空洞保持无效
    assert not image.valid[0, 4]
    assert image.valid[1].tolist() == [True, False, False, False, False]
    long_gap = fill_gaps_rowwise(_image([[1.0, 0.0, 0.0, 0.0, 2.0]]), max_gap=2)
    assert long_gap.valid.sum() == 2


def test_median_filter_removes_spikes_and_keeps_invalid():
    values = np.full((5, 5), 1.0)
    values[2, 2] = 9.0
    valid = np.ones((5, 5), dtype=bool)
    valid[0, 0] = False
    filtered = median_filter_3x3(_image(values, valid))
    assert filtered.values[2, 2] == pytest.approx(1.0)
    assert not filtered.valid[0, 0] and filtered.values[0, 0] == 0.0


def test_median_even_count_takes_lower_value():
    values = np.array([[1.0, 2.0], [0.0, 0.0]])
    filtered = median_filter_3x3(_image(values))
    assert filtered.values[0, 0] == 1.0


def test_fill_nearest_tie_prefers_smaller_row():
    values = np.zeros((3, 3))
    values[0, 1] = 1.0
    values[1, 0] = 2.0
    filled = fill_nearest(_image(values))
    assert filled.valid.all()
    assert filled.values[0, 0] == 1.0
    assert filled.values[2, 0] == 2.0
    with pytest.raises(EmptyInputError):
        fill_nearest(RangeImage.empty())


def test_unproject_then_rasterize_restores_image(rng):
    values = rng.uniform(0.5, 2.5, size=(40, 276))
    valid = rng.random((40, 276)) < 0.7
    image = RangeImage(values, valid)
    restored = rasterize(unproject(image))
    assert np.array_equal(restored.valid, image.valid)
    assert np.allclose(restored.values, image.values, atol=1e-9)


def test_preprocess_on_flat_scan_is_dense_and_clipped():
    field = DevTools.flat_field(size=12.0, cell=0.05)
    cloud = lidar_scan(LidarModel(), DevTools.base_pose(field), field)
    image, measured = preprocess_with_mask(cloud)
    assert image.valid.all()
    assert image.values.min() >= 0.2 and image.values.max() <= 3.0
    # 倒装：高倾角线束看向近处地面，负倾角线束朝天
    assert measured[:20].all()
    assert not measured[35:].any()
    assert np.array_equal(preprocess(cloud).values, image.values)
    normalized = to_normalized(image)
    assert normalized.dtype == np.float32 and normalized.max() <= 1.0


def test_preprocess_rejects_empty_cloud():
    with pytest.raises(EmptyInputError):
        preprocess(PointCloud.from_points(np.zeros((0, 3))))
    assert len(lidar_scan(LidarModel(), Pose.from_xyz_rpy(0.0, 0.0, 0.75), DevTools.flat_field())) > 0
