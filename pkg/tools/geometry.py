"""
heightmap-eds 几何基础 - 坐标系、位姿变换与地形高度场
坐标系约定：x 前、y 左、z 上（右手系），yaw 自 +x 逆时针
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from errors import DataValidationError, OutOfBoundsError

logger = logging.getLogger(__name__)

# 点以 (N, 3) 数组表示；单个 Vec3 为长度 3 的数组
Vec3 = np.ndarray

ORTHONORMAL_TOL = 1e-9


class TerrainKind(Enum):
    """地形类别"""
    FLAT = "flat"
    SLOPE = "slope"
    STAIRS_UP = "stairs_up"
    STAIRS_DOWN = "stairs_down"
    STEPS = "steps"
    ROUGH = "rough"
    COMPOSITE = "composite"


# 地形集合的固定顺序
TERRAIN_ORDER = [
    TerrainKind.FLAT,
    TerrainKind.SLOPE,
    TerrainKind.STAIRS_UP,
    TerrainKind.STAIRS_DOWN,
    TerrainKind.STEPS,
    TerrainKind.ROUGH,
    TerrainKind.COMPOSITE,
]


def vec3(x: float, y: float, z: float) -> Vec3:
    """构造一个有限的三维向量"""
    v = np.array([x, y, z], dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise DataValidationError(f"Vec3 components must be finite, got {v}")
    return v


@dataclass(frozen=True, eq=False)
class Pose:
    """刚体位姿：position 为世界系坐标，rotation 为 body→world 旋转矩阵"""
    position: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        position = np.asarray(self.position, dtype=np.float64).reshape(3)
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(position)):
            raise DataValidationError("Pose position must be finite")
        if np.max(np.abs(rotation @ rotation.T - np.eye(3))) > ORTHONORMAL_TOL:
            raise DataValidationError("Pose rotation is not orthonormal")
        if np.linalg.det(rotation) <= 0:
            raise DataValidationError("Pose rotation must have det = +1")
        # frozen dataclass 只能通过 object.__setattr__ 归一化字段
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "rotation", rotation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.eye(3))

    @classmethod
    def from_xyz_rpy(cls, x: float, y: float, z: float,
                     roll: float = 0.0, pitch: float = 0.0, yaw: float = 0.0) -> "Pose":
        """由位置与 roll/pitch/yaw (rad) 构造，R = Rz(yaw)·Ry(pitch)·Rx(roll)"""
        rotation = Rotation.from_euler("ZYX", [yaw, pitch, roll]).as_matrix()
        # 消除 Rotation 的数值误差，保证正交性检查通过
        u, _, vt = np.linalg.svd(rotation)
        return cls(np.array([x, y, z], dtype=np.float64), u @ vt)

    @property
    def yaw(self) -> float:
        """机体 x 轴在水平面内的朝向"""
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        """p_world = R·p_body + t"""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.position

    def inverse(self) -> "Pose":
        rotation_t = self.rotation.T
        return Pose(-rotation_t @ self.position, rotation_t)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other：先应用 other，再应用 self"""
        return Pose(self.rotation @ other.position + self.position, self.rotation @ other.rotation)


def transform_points(pose: Pose, points: np.ndarray) -> np.ndarray:
    """对一组点应用位姿"""
    return pose.transform_points(points)


@dataclass(frozen=True, eq=False)
class HeightField:
    """
    地面真值地形：稠密高程网格 + 双线性查询

    节点 (i, j) 位于网格单元中心 origin + (i + 0.5, j + 0.5)·cell_size；
    i 沿 x（length 方向），j 沿 y（width 方向）。
    """
    origin_xy: Tuple[float, float]
    cell_size: float
    elevations: np.ndarray
    terrain_kind: TerrainKind = TerrainKind.FLAT

    def __post_init__(self):
        elevations = np.array(self.elevations, dtype=np.float64)
        if self.cell_size <= 0:
            raise DataValidationError(f"cell_size must be positive, got {self.cell_size}")
        if elevations.ndim != 2 or elevations.shape[0] < 2 or elevations.shape[1] < 2:
            raise DataValidationError(f"HeightField grid must be at least 2x2, got {elevations.shape}")
        if not np.all(np.isfinite(elevations)):
            raise DataValidationError("HeightField elevations must be finite")
        elevations.setflags(write=False)
        object.__setattr__(self, "elevations", elevations)
        object.__setattr__(self, "origin_xy", (float(self.origin_xy[0]), float(self.origin_xy[1])))

    @property
    def length(self) -> int:
        """x 方向单元数"""
        return self.elevations.shape[0]

    @property
    def width(self) -> int:
        """y 方向单元数"""
        return self.elevations.shape[1]

    @property
    def footprint(self) -> Tuple[float, float, float, float]:
        """(x_min, x_max, y_min, y_max)"""
        x0, y0 = self.origin_xy
        return (x0, x0 + self.length * self.cell_size, y0, y0 + self.width * self.cell_size)

    @property
    def min_elevation(self) -> float:
        return float(self.elevations.min())

    @property
    def max_elevation(self) -> float:
        return float(self.elevations.max())

    def node_coordinates(self) -> Tuple[np.ndarray, np.ndarray]:
        """节点的 x、y 坐标向量"""
        x0, y0 = self.origin_xy
        xs = x0 + (np.arange(self.length) + 0.5) * self.cell_size
        ys = y0 + (np.arange(self.width) + 0.5) * self.cell_size
        return xs, ys

    def contains(self, x: Union[float, np.ndarray], y: Union[float, np.ndarray]) -> np.ndarray:
        """判断查询点是否落在地形范围内"""
        x_min, x_max, y_min, y_max = self.footprint
        x = np.asarray(x)
        y = np.asarray(y)
        return (x >= x_min) & (x <= x_max) & (y >= y_min) & (y <= y_max)

    def height_at(self, x: Union[float, np.ndarray], y: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
        """双线性插值查询；范围外抛出 OutOfBoundsError"""
        scalar = np.ndim(x) == 0 and np.ndim(y) == 0
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if not np.all(self.contains(x, y)):
            raise OutOfBoundsError("height_at query outside the terrain footprint")
        heights = self._bilinear(x, y)
        return float(heights) if scalar else heights

    def _bilinear(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """不做范围检查的双线性插值（边缘半个单元复制边界节点）"""
        x0, y0 = self.origin_xy
        u = np.clip((x - x0) / self.cell_size - 0.5, 0.0, self.length - 1)
        v = np.clip((y - y0) / self.cell_size - 0.5, 0.0, self.width - 1)
        i = np.minimum(np.floor(u).astype(np.int64), self.length - 2)
        j = np.minimum(np.floor(v).astype(np.int64), self.width - 2)
        fu = u - i
        fv = v - j
        z = self.elevations
        return ((1 - fu) * (1 - fv) * z[i, j] + fu * (1 - fv) * z[i + 1, j]
                + (1 - fu) * fv * z[i, j + 1] + fu * fv * z[i + 1, j + 1])


def height_at(field: HeightField, x, y):
    """模块级查询入口"""
    return field.height_at(x, y)
