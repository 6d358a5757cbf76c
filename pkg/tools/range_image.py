"""
heightmap-eds 球面投影与距离图像预处理

点云 → 276×40 距离图像：栅格化 → 截断 → 行内补洞 → 中值 → 最近邻填充 → 中值
接缝位于机器人正后方 (φ = π → 第 0 列)，第 0 行对应最高倾角 52°。
"""
import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple, TypeVar

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree

from errors import DataValidationError, EmptyInputError, ShapeError

logger = logging.getLogger(__name__)

LIDAR_ROWS = 40
LIDAR_COLUMNS = 276
INCLINATION_MIN_DEG = -7.0
INCLINATION_MAX_DEG = 52.0
INCLINATION_SPAN_DEG = INCLINATION_MAX_DEG - INCLINATION_MIN_DEG

CLIP_MIN = 0.2
CLIP_MAX = 3.0
DEFAULT_MAX_GAP = 4

# 视场边界判定的角度容差（度），保证恰好位于 -7° / 52° 的线束不被剔除
FOV_TOLERANCE_DEG = 1e-6

# 最近邻填充时 KD 树的候选个数
NEAREST_CANDIDATES = 16


@dataclass(frozen=True, eq=False)
class MaskedImage:
    """带有效性掩码的单通道图像；无效像素的值恒为 0"""
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        valid = np.array(self.valid, dtype=bool)
        if values.ndim != 2 or values.shape != valid.shape:
            raise ShapeError(f"values {values.shape} and mask {valid.shape} must be equal 2-D shapes")
        if not np.all(np.isfinite(values[valid])):
            raise DataValidationError("valid pixels must be finite")
        values[~valid] = 0.0
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean())

    def with_values(self, values: np.ndarray, valid: Optional[np.ndarray] = None):
        """返回同类型的新图像"""
        return replace(self, values=values, valid=self.valid if valid is None else valid)


class RangeImage(MaskedImage):
    """球面展开后的 LiDAR 距离图像 (H=40, W=276)"""

    @classmethod
    def empty(cls, height: int = LIDAR_ROWS, width: int = LIDAR_COLUMNS) -> "RangeImage":
        return cls(np.zeros((height, width)), np.zeros((height, width), dtype=bool))


ImageT = TypeVar("ImageT", bound=MaskedImage)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """传感器坐标系下的点云，附带每个点的线束号与列号"""
    points: np.ndarray
    rings: np.ndarray
    columns: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        rings = np.asarray(self.rings, dtype=np.int64).reshape(-1)
        columns = np.asarray(self.columns, dtype=np.int64).reshape(-1)
        if not (len(points) == len(rings) == len(columns)):
            raise ShapeError("points, rings and columns must have equal length")
        if not np.all(np.isfinite(points)):
            raise DataValidationError("PointCloud points must be finite")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "rings", rings)
        object.__setattr__(self, "columns", columns)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def from_points(cls, points: np.ndarray) -> "PointCloud":
        """无线束信息的点云（索引填 -1）"""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        marker = np.full(len(points), -1, dtype=np.int64)
        return cls(points, marker, marker)


@dataclass(frozen=True)
class SphericalCoord:
    range: float
    azimuth: float
    inclination: float


def spherical_arrays(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """向量化投影，返回 (r, φ, θ)，φ ∈ (-π, π]"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    r = np.sqrt(x * x + y * y + z * z)
    azimuth = np.arctan2(y, x)
    azimuth = np.where(azimuth <= -np.pi, np.pi, azimuth)
    inclination = np.arctan2(z, np.sqrt(x * x + y * y))
    return r, azimuth, inclination


def spherical_project(p: np.ndarray) -> SphericalCoord:
    """笛卡尔坐标 → (距离, 方位角, 倾角)"""
    p = np.asarray(p, dtype=np.float64).reshape(3)
    if not np.any(p):
        raise DataValidationError("Cannot project the zero vector")
    r, azimuth, inclination = spherical_arrays(p[None, :])
    return SphericalCoord(float(r[0]), float(azimuth[0]), float(inclination[0]))


def azimuth_to_column(azimuth: np.ndarray, width: int = LIDAR_COLUMNS) -> np.ndarray:
    column = np.floor((np.pi - azimuth) / (2.0 * np.pi) * width).astype(np.int64)
    return np.clip(column, 0, width - 1)


def inclination_to_row(inclination_deg: np.ndarray, height: int = LIDAR_ROWS) -> np.ndarray:
    row = np.floor((INCLINATION_MAX_DEG - inclination_deg) / INCLINATION_SPAN_DEG * height).astype(np.int64)
    return np.clip(row, 0, height - 1)


def column_azimuth(column: np.ndarray, width: int = LIDAR_COLUMNS) -> np.ndarray:
    """列中心方位角 (rad)"""
    return np.pi - (np.asarray(column, dtype=np.float64) + 0.5) * 2.0 * np.pi / width


def row_inclination(row: np.ndarray, height: int = LIDAR_ROWS) -> np.ndarray:
    """行中心倾角 (rad)"""
    deg = INCLINATION_MAX_DEG - (np.asarray(row, dtype=np.float64) + 0.5) * INCLINATION_SPAN_DEG / height
    return np.deg2rad(deg)


def ring_to_row(ring: np.ndarray, height: int = LIDAR_ROWS) -> np.ndarray:
    """线束号自下而上，行号自上而下"""
    return height - 1 - np.asarray(ring, dtype=np.int64)


def rasterize(cloud: PointCloud, height: int = LIDAR_ROWS, width: int = LIDAR_COLUMNS) -> RangeImage:
    """点云栅格化；同一像素取最近距离，视场外点丢弃"""
    image = np.full((height, width), np.inf)
    if len(cloud) == 0:
        return RangeImage(np.zeros((height, width)), np.zeros((height, width), dtype=bool))

    r, azimuth, inclination = spherical_arrays(cloud.points)
    inclination_deg = np.rad2deg(inclination)
    in_fov = ((inclination_deg >= INCLINATION_MIN_DEG - FOV_TOLERANCE_DEG)
              & (inclination_deg <= INCLINATION_MAX_DEG + FOV_TOLERANCE_DEG)
              & (r > 0))
    rows = inclination_to_row(inclination_deg[in_fov], height)
    columns = azimuth_to_column(azimuth[in_fov], width)
    np.minimum.at(image, (rows, columns), r[in_fov])

    valid = np.isfinite(image)
    return RangeImage(np.where(valid, image, 0.0), valid)


def clip_ranges(image: ImageT, min_range: float = CLIP_MIN, max_range: float = CLIP_MAX) -> ImageT:
    """超过上限的截断为上限；低于下限的置为无效"""
    values = np.minimum(image.values, max_range)
    valid = image.valid & (image.values >= min_range)
    return image.with_values(values, valid)


def fill_gaps_rowwise(image: ImageT, max_gap: int = DEFAULT_MAX_GAP) -> ImageT:
    """行内线性插值填补两侧均有效、长度 ≤ max_gap 的空洞（不跨接缝回绕）"""
    values = image.values.copy()
    valid = image.valid.copy()
    for row in range(values.shape[0]):
        row_valid = image.valid[row]
        if row_valid.all() or not row_valid.any():
            continue
        # 空洞段起止：valid 从 1→0 与 0→1 的位置
        edges = np.diff(np.concatenate(([1], row_valid.astype(np.int8), [1])))
        starts = np.flatnonzero(edges == -1)
        ends = np.flatnonzero(edges == 1)
        for start, end in zip(starts, ends):
            length = end - start
            if start == 0 or end == len(row_valid) or length > max_gap:
                continue
            left = image.values[row, start - 1]
            right = image.values[row, end]
            fraction = np.arange(1, length + 1) / (length + 1)
            values[row, start:end] = left + (right - left) * fraction
            valid[row, start:end] = True
    return image.with_values(values, valid)


def median_filter_3x3(image: ImageT) -> ImageT:
    """
    3×3 中值滤波，边界复制填充

    只统计邻域内的有效像素；有效个数为偶数时取下中位数，
    因此输出值总是输入值之一。无效像素保持无效。
    """
    data = np.where(image.valid, image.values, np.nan)
    padded = np.pad(data, 1, mode="edge")
    windows = sliding_window_view(padded, (3, 3)).reshape(data.shape[0], data.shape[1], 9)
    windows = np.sort(windows, axis=-1)
    counts = np.sum(~np.isnan(windows), axis=-1)
    index = np.maximum((counts - 1) // 2, 0)
    medians = np.take_along_axis(windows, index[..., None], axis=-1)[..., 0]
    values = np.where(image.valid, medians, 0.0)
    return image.with_values(values, image.valid)


def fill_nearest(image: ImageT) -> ImageT:
    """
    剩余无效像素取欧氏像素距离最近的有效像素值

    并列时取行号较小者，再取列号较小者。
    """
    if not image.valid.any():
        raise EmptyInputError("fill_nearest needs at least one valid pixel")
    if image.valid.all():
        return image

    source = np.argwhere(image.valid)
    target = np.argwhere(~image.valid)
    k = min(NEAREST_CANDIDATES, len(source))
    tree = cKDTree(source)
    _, candidates = tree.query(target, k=k)
    candidates = candidates.reshape(len(target), k)

    # 用整数平方距离重新比较，避免浮点并列
    delta = source[candidates] - target[:, None, :]
    dist2 = np.sum(delta * delta, axis=-1)
    best = dist2.min(axis=1)
    # 候选集合内的并列：按 (距离, 行, 列) 字典序挑选
    order_key = (dist2 * (image.shape[0] + 1) + source[candidates][..., 0]) * (image.shape[1] + 1) \
        + source[candidates][..., 1]
    chosen = candidates[np.arange(len(target)), np.argmin(order_key, axis=1)]

    # 并列可能延伸到候选集之外，此时退回暴力搜索
    overflow = np.flatnonzero((dist2.max(axis=1) == best) & (k < len(source)))
    for idx in overflow:
        d2 = np.sum((source - target[idx]) ** 2, axis=1)
        ties = np.flatnonzero(d2 == d2.min())
        chosen[idx] = ties[np.lexsort((source[ties, 1], source[ties, 0]))[0]]

    values = image.values.copy()
    values[target[:, 0], target[:, 1]] = image.values[source[chosen, 0], source[chosen, 1]]
    return image.with_values(values, np.ones_like(image.valid))


def preprocess_with_mask(cloud: PointCloud, min_range: float = CLIP_MIN, max_range: float = CLIP_MAX,
                         max_gap: int = DEFAULT_MAX_GAP) -> Tuple[RangeImage, np.ndarray]:
    """完整预处理，同时返回截断后、补洞前的有效性掩码（实测像素）"""
    if len(cloud) == 0:
        raise EmptyInputError("preprocess received an empty point cloud")
    clipped = clip_ranges(rasterize(cloud), min_range, max_range)
    measured = clipped.valid.copy()
    image = fill_gaps_rowwise(clipped, max_gap)
    image = median_filter_3x3(image)
    image = fill_nearest(image)
    image = median_filter_3x3(image)
    return image, measured


def preprocess(cloud: PointCloud, min_range: float = CLIP_MIN, max_range: float = CLIP_MAX,
               max_gap: int = DEFAULT_MAX_GAP) -> RangeImage:
    """栅格化 → 截断 → 行内补洞 → 中值 → 最近邻填充 → 中值"""
    image, _ = preprocess_with_mask(cloud, min_range, max_range, max_gap)
    return image


def unproject(image: RangeImage) -> PointCloud:
    """有效像素按格心角度反投影为传感器系点云"""
    height, width = image.shape
    rows, columns = np.nonzero(image.valid)
    r = image.values[rows, columns]
    azimuth = column_azimuth(columns, width)
    inclination = row_inclination(rows, height)
    points = np.stack([
        r * np.cos(inclination) * np.cos(azimuth),
        r * np.cos(inclination) * np.sin(azimuth),
        r * np.sin(inclination),
    ], axis=1)
    return PointCloud(points, ring_to_row(rows, height), columns)


def to_normalized(image: MaskedImage, scale: float = CLIP_MAX) -> np.ndarray:
    """网络输入：距离 / scale，无效像素为 0 (float32)"""
    return np.where(image.valid, image.values / scale, 0.0).astype(np.float32)
