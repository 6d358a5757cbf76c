"""
位姿与地形高程场的基础性质
"""
import numpy as np
import pytest

from errors import DataValidationError, OutOfBoundsError
from tools.geometry import HeightField, Pose, TerrainKind, vec3


def test_vec3_rejects_non_finite():
    assert np.allclose(vec3(1, 2, 3), [1, 2, 3])
    with pytest.raises(DataValidationError):
        vec3(np.nan, 0, 0)


def test_pose_rejects_non_orthonormal_rotation():
    with pytest.raises(DataValidationError):
        Pose(np.zeros(3), np.diag([1.0, 1.0, 2.0]))
    with pytest.raises(DataValidationError):
        Pose(np.zeros(3), np.diag([1.0, 1.0, -1.0]))


def test_yaw_rotation_moves_forward_point_to_the_left():
    pose = Pose.from_xyz_rpy(1.0, 2.0, 0.5, yaw=np.pi / 2)
    world = pose.transform_points(np.array([[1.0, 0.0, 0.0]]))
    assert np.allclose(world, [[1.0, 3.0, 0.5]])
    assert pose.yaw == pytest.approx(np.pi / 2)


def test_compose_with_inverse_is_identity(rng):
    pose = Pose.from_xyz_rpy(*rng.normal(size=3), *rng.uniform(-0.5, 0.5, size=3))
    both = pose.compose(pose.inverse())
    assert np.allclose(both.position, 0.0, atol=1e-12)
    assert np.allclose(both.rotation, np.eye(3), atol=1e-12)
    points = rng.normal(size=(5, 3))
    assert np.allclose(pose.inverse().transform_points(pose.transform_points(points)), points)


def test_heightfield_bilinear_is_exact_on_planes():
    cell = 0.1
    xs = -1.0 + (np.arange(20) + 0.5) * cell
    ys = -1.0 + (np.arange(20) + 0.5) * cell
    plane = 0.3 * xs[:, None] - 0.2 * ys[None, :] + 0.1
    field = HeightField((-1.0, -1.0), cell, plane, TerrainKind.SLOPE)
    x, y = np.array([-0.8, 0.0, 0.33, 0.84]), np.array([-0.5, 0.1, 0.77, -0.84])
    assert np.allclose(field.height_at(x, y), 0.3 * x - 0.2 * y + 0.1)


def test_heightfield_nodes_sit_at_cell_centers():
    field = HeightField((0.0, 0.0), 0.5, np.arange(9, dtype=float).reshape(3, 3))
    xs, ys = field.node_coordinates()
    assert np.allclose(xs, [0.25, 0.75, 1.25])
    assert field.height_at(0.75, 1.25) == pytest.approx(5.0)
    assert field.footprint == (0.0, 1.5, 0.0, 1.5)


def test_heightfield_edge_band_replicates_border_nodes():
    field = HeightField((0.0, 0.0), 1.0, np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert field.height_at(0.1, 0.1) == pytest.approx(1.0)
    assert field.height_at(2.0, 2.0) == pytest.approx(4.0)


def test_heightfield_rejects_out_of_bounds_and_bad_grids():
    field = HeightField((0.0, 0.0), 1.0, np.zeros((2, 2)))
    with pytest.raises(OutOfBoundsError):
        field.height_at(2.5, 0.5)
    with pytest.raises(DataValidationError):
        HeightField((0.0, 0.0), 1.0, np.zeros((1, 4)))
    with pytest.raises(DataValidationError):
        HeightField((0.0, 0.0), 0.0, np.zeros((2, 2)))
    with pytest.raises(DataValidationError):
        HeightField((0.0, 0.0), 1.0, np.array([[0.0, np.inf], [0.0, 0.0]]))
