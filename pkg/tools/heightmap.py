"""
heightmap-eds 机器人中心高程图
网格几何（点数 = 尺寸/分辨率 + 1）、真值提取、误差度量
"""
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from errors import DataValidationError, EmptyInputError, OutOfBoundsError, ShapeError
from tools.geometry import HeightField, Pose

logger = logging.getLogger(__name__)

RESOLUTION_RANGE = (0.04, 0.12)
FLATTENING_ORDER = "x-outer rear-to-front, y-inner right-to-left"


@dataclass(frozen=True)
class HeightmapSpec:
    """高程图几何：length 沿机体 x，width 沿机体 y，网格整体前移 forward_offset"""
    length: float = 0.98
    width: float = 0.7
    resolution: float = 0.07
    forward_offset: float = 0.2

    def __post_init__(self):
        low, high = RESOLUTION_RANGE
        if not low - 1e-12 <= self.resolution <= high + 1e-12:
            raise DataValidationError(f"heightmap resolution must lie in [{low}, {high}], got {self.resolution}")
        if self.length <= 0 or self.width <= 0:
            raise DataValidationError("heightmap extents must be positive")

    @property
    def nx(self) -> int:
        return int(round(self.length / self.resolution)) + 1

    @property
    def ny(self) -> int:
        return int(round(self.width / self.resolution)) + 1

    @property
    def size(self) -> int:
        return self.nx * self.ny

    def local_axes(self) -> Tuple[np.ndarray, np.ndarray]:
        """基座系下的网格坐标向量 (x_i, y_j)"""
        xs = self.forward_offset - self.length / 2.0 + np.arange(self.nx) * self.resolution
        ys = -self.width / 2.0 + np.arange(self.ny) * self.resolution
        return xs, ys

    def to_dict(self) -> dict:
        return {
            "length": self.length,
            "width": self.width,
            "resolution": self.resolution,
            "forward_offset": self.forward_offset,
            "nx": self.nx,
            "ny": self.ny,
            "flattening": FLATTENING_ORDER,
        }


@dataclass(frozen=True, eq=False)
class Heightmap:
    """展平后的高程图（相对基座高度，米）"""
    spec: HeightmapSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if len(values) != self.spec.size:
            raise ShapeError(f"heightmap needs {self.spec.size} values, got {len(values)}")
        if not np.all(np.isfinite(values)):
            raise DataValidationError("heightmap values must be finite")
        object.__setattr__(self, "values", values)

    def grid(self) -> np.ndarray:
        """nx × ny 视图，行 = x 索引"""
        return self.values.reshape(self.spec.nx, self.spec.ny)


def grid_points(spec: HeightmapSpec, base_pose: Pose) -> np.ndarray:
    """世界坐标下的网格点 (nx·ny, 2)；只随基座偏航旋转"""
    xs, ys = spec.local_axes()
    local_x, local_y = np.meshgrid(xs, ys, indexing="ij")
    yaw = base_pose.yaw
    c, s = np.cos(yaw), np.sin(yaw)
    world_x = base_pose.position[0] + c * local_x - s * local_y
    world_y = base_pose.position[1] + s * local_x + c * local_y
    return np.stack([world_x.reshape(-1), world_y.reshape(-1)], axis=1)


def extract_ground_truth(spec: HeightmapSpec, base_pose: Pose, field: HeightField) -> Heightmap:
    """虚拟扫描仪：网格点处地形高度减去基座高度"""
    points = grid_points(spec, base_pose)
    if not np.all(field.contains(points[:, 0], points[:, 1])):
        raise OutOfBoundsError("heightmap grid leaves the terrain footprint")
    heights = field.height_at(points[:, 0], points[:, 1])
    return Heightmap(spec, heights - base_pose.position[2])


def _check_pair(pred: Heightmap, truth: Heightmap):
    if pred.spec != truth.spec:
        raise ShapeError("heightmaps were built from different specs")


def mae(pred: Heightmap, truth: Heightmap) -> float:
    """平均绝对误差"""
    _check_pair(pred, truth)
    return float(np.mean(np.abs(pred.values - truth.values)))


def spatial_error_map(preds: Sequence[Heightmap], truths: Sequence[Heightmap]) -> np.ndarray:
    """逐格 MAE，shape (nx, ny)"""
    if len(preds) == 0 or len(preds) != len(truths):
        raise EmptyInputError("spatial_error_map needs at least one (pred, truth) pair of equal counts")
    for pred, truth in zip(preds, truths):
        _check_pair(pred, truth)
    errors = np.stack([np.abs(p.values - t.values) for p, t in zip(preds, truths)])
    spec = preds[0].spec
    return errors.mean(axis=0).reshape(spec.nx, spec.ny)


def resolution_sweep(resolutions: Sequence[float], length: float = 0.98, width: float = 0.7,
                     forward_offset: float = 0.2) -> List[HeightmapSpec]:
    """同一尺寸下不同分辨率的网格规格"""
    specs = []
    for resolution in resolutions:
        spec = HeightmapSpec(length, width, resolution, forward_offset)
        logger.info(f"分辨率 {resolution * 100:.1f} cm -> {spec.nx} x {spec.ny} = {spec.size} 点")
        specs.append(spec)
    return specs


def stair_profile(heightmap: Heightmap) -> Tuple[np.ndarray, np.ndarray]:
    """中心纵向剖面：(基座系 x 坐标, 高度)"""
    xs, _ = heightmap.spec.local_axes()
    return xs, heightmap.grid()[:, heightmap.spec.ny // 2].copy()
