"""
几何融合基线：滚动高程缓冲与整段轨迹
"""
import numpy as np
import pytest

from data_pipeline import build_sensor_models, simulate_episode
from development.dev_config import DevTools
from tools.fusion_oracle import ElevationBuffer, run_oracle
from tools.geometry import Pose
from tools.heightmap import HeightmapSpec


def test_integrate_keeps_cell_maximum_then_averages():
    buffer = ElevationBuffer(size_m=1.0, cell=0.1)
    buffer.integrate(np.array([[0.05, 0.05, 1.0], [0.06, 0.04, 2.0]]), 0)
    assert buffer.elevation[5, 5] == pytest.approx(2.0)
    buffer.integrate(np.array([[0.05, 0.05, 0.0]]), 1)
    assert buffer.elevation[5, 5] == pytest.approx(1.0)
    assert buffer.last_update[5, 5] == 1
    assert buffer.observed.sum() == 1


def test_recenter_shifts_whole_cells():
    buffer = ElevationBuffer(size_m=1.0, cell=0.1)
    buffer.integrate(np.array([[0.05, 0.05, 1.0]]), 0)
    buffer.recenter(0.35, 0.05)
    assert buffer.observed[2, 5]
    assert buffer.elevation[2, 5] == pytest.approx(1.0)
    buffer.recenter(20.0, 20.0)
    assert not buffer.observed.any()


def test_query_empty_buffer_is_uncovered():
    spec = HeightmapSpec()
    heightmap, coverage = ElevationBuffer().query(spec, Pose.from_xyz_rpy(0.0, 0.0, 0.75))
    assert not coverage.any()
    assert np.allclose(heightmap.values, -0.75)


def test_query_interpolates_observed_cells():
    buffer = ElevationBuffer(size_m=2.0, cell=0.05)
    centers = (np.arange(-20, 20) + 0.5) * 0.05
    x, y = np.meshgrid(centers, centers, indexing="ij")
    buffer.integrate(np.stack([x.ravel(), y.ravel(), np.full(x.size, 0.3)], axis=1), 0)
    heightmap, coverage = buffer.query(HeightmapSpec(), Pose.from_xyz_rpy(0.0, 0.0, 1.0, yaw=0.3))
    assert coverage.all()
    assert np.allclose(heightmap.values, -0.7)


def test_oracle_on_flat_terrain_is_accurate():
    field = DevTools.flat_field(size=6.0)
    config = DevTools.tiny_run_config(steps=3)
    episode = simulate_episode(field, seed=5, steps=3, config=config)
    lidar_model, depth_model = build_sensor_models(config.sensors)
    spec = HeightmapSpec()
    predictions = run_oracle(episode, spec, depth_model, lidar_model)
    assert predictions.shape == (3, spec.size)
    assert np.mean(np.abs(predictions - episode.heightmaps)) < 0.01
    depth_only = run_oracle(episode, spec, depth_model, lidar_model, use_lidar=False)
    assert np.mean(np.abs(depth_only - episode.heightmaps)) < 0.01
