"""
heightmap-eds 传感器仿真
对 HeightField 做光线投射，生成 LiDAR 点云与深度图，以及训练用的噪声/遮挡污染
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from errors import DataValidationError, ShapeError
from tools.geometry import HeightField, Pose
from tools.range_image import (
    CLIP_MAX, CLIP_MIN, INCLINATION_MAX_DEG, INCLINATION_MIN_DEG, LIDAR_COLUMNS, LIDAR_ROWS,
    MaskedImage, PointCloud, RangeImage, column_azimuth, ring_to_row,
)

logger = logging.getLogger(__name__)

MARCH_STEP = 0.01
BISECTION_STEPS = 20
# 每次向量化推进的步数（控制内存占用）
MARCH_BLOCK = 64

DEPTH_WIDTH = 160
DEPTH_HEIGHT = 120


def raycast_batch(field: HeightField, origin: np.ndarray, directions: np.ndarray,
                  max_range: float) -> np.ndarray:
    """
    从同一原点批量投射光线，返回命中距离（未命中为 NaN）

    1 cm 定步长推进找到首个位于地面之下的采样点，再在区间内二分 20 次，
    返回二分区间的上端（保证位于地面或其下方）。离开地形范围视为未命中。
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    if max_range <= 0:
        raise DataValidationError(f"max_range must be positive, got {max_range}")
    norms = np.linalg.norm(directions, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise DataValidationError("ray directions must be unit vectors")
    if not field.contains(origin[0], origin[1]):
        raise DataValidationError(f"sensor origin {origin[:2]} lies outside the terrain")
    if origin[2] - field.height_at(origin[0], origin[1]) < 0.0:
        raise DataValidationError("sensor origin lies below the terrain surface")

    n = len(directions)
    hits = np.full(n, np.nan)
    if n == 0:
        return hits

    dz = directions[:, 2]
    z_max = field.max_elevation
    z_min = field.min_elevation

    # 推进区间 [t_start, t_end]：只在射线高度位于 [z_min, z_max] 的部分搜索
    t_start = np.zeros(n)
    t_end = np.full(n, float(max_range))
    descending = dz < 0
    t_start[descending] = np.maximum((origin[2] - z_max) / -dz[descending] - MARCH_STEP, 0.0)
    t_end[descending] = np.minimum(t_end[descending], (origin[2] - z_min) / -dz[descending] + MARCH_STEP)
    ascending = dz > 0
    t_end[ascending] = np.minimum(t_end[ascending], np.maximum((z_max - origin[2]) / dz[ascending], 0.0))
    if origin[2] > z_max:
        t_end[dz == 0] = 0.0
    t_end = np.minimum(t_end, _footprint_exit(field, origin, directions))

    active = np.flatnonzero(t_end > t_start)
    t_prev = t_start.copy()
    k = 0
    while len(active):
        steps = t_start[active, None] + (k + np.arange(1, MARCH_BLOCK + 1)) * MARCH_STEP
        limit = t_end[active, None]
        within = steps - MARCH_STEP < limit
        samples = np.minimum(steps, limit)
        below = _clearance(field, origin, directions[active], samples) <= 0.0
        below &= within

        found = below.any(axis=1)
        first = np.argmax(below, axis=1)
        rows = np.flatnonzero(found)
        if len(rows):
            idx = active[rows]
            hi = samples[rows, first[rows]]
            lo = np.where(first[rows] > 0, samples[rows, first[rows] - 1], t_prev[idx])
            hits[idx] = _bisect(field, origin, directions[idx], lo, hi)

        t_prev[active] = samples[:, -1]
        exhausted = ~within[:, -1]
        active = active[~found & ~exhausted]
        k += MARCH_BLOCK
    return hits


def raycast(field: HeightField, origin: np.ndarray, direction: np.ndarray,
            max_range: float) -> Optional[float]:
    """单条光线；未命中返回 None"""
    t = raycast_batch(field, origin, np.asarray(direction, dtype=np.float64)[None, :], max_range)[0]
    return None if np.isnan(t) else float(t)


def _clearance(field: HeightField, origin, directions, t) -> np.ndarray:
    """射线点高度减地形高度"""
    x = origin[0] + directions[:, 0, None] * t
    y = origin[1] + directions[:, 1, None] * t
    z = origin[2] + directions[:, 2, None] * t
    return z - field._bilinear(x, y)


def _bisect(field: HeightField, origin, directions, lo, hi) -> np.ndarray:
    lo = lo.copy()
    hi = hi.copy()
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        below = _clearance(field, origin, directions, mid[:, None])[:, 0] <= 0.0
        hi = np.where(below, mid, hi)
        lo = np.where(below, lo, mid)
    return hi


def _footprint_exit(field: HeightField, origin, directions) -> np.ndarray:
    """射线水平投影离开地形矩形的距离（slab 法）"""
    x_min, x_max, y_min, y_max = field.footprint
    exit_t = np.full(len(directions), np.inf)
    for axis, (low, high) in enumerate(((x_min, x_max), (y_min, y_max))):
        d = directions[:, axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_high = np.where(d > 0, (high - origin[axis]) / d, np.inf)
            t_low = np.where(d < 0, (low - origin[axis]) / d, np.inf)
        exit_t = np.minimum(exit_t, np.minimum(t_high, t_low))
    return exit_t


@dataclass(frozen=True, eq=False)
class LidarModel:
    """规则角度网格的 LiDAR：40 线 × 276 列，传感器系倾角 [-7°, 52°]，默认倒装在基座上方 0.40 m"""
    mount: Pose = field(default_factory=lambda: Pose.from_xyz_rpy(0.0, 0.0, 0.40, roll=np.pi))
    channels: int = LIDAR_ROWS
    columns: int = LIDAR_COLUMNS
    max_range: float = 10.0
    rate_hz: float = 10.0

    def ring_inclinations(self) -> np.ndarray:
        """各线束倾角 (rad)，自下而上严格递增"""
        step = (INCLINATION_MAX_DEG - INCLINATION_MIN_DEG) / (self.channels - 1)
        return np.deg2rad(INCLINATION_MIN_DEG + np.arange(self.channels) * step)

    def ray_grid(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """返回 (rings, columns, directions)，方向在传感器坐标系下"""
        rings, columns = np.meshgrid(np.arange(self.channels), np.arange(self.columns), indexing="ij")
        rings = rings.reshape(-1)
        columns = columns.reshape(-1)
        inclination = self.ring_inclinations()[rings]
        azimuth = column_azimuth(columns, self.columns)
        directions = np.stack([
            np.cos(inclination) * np.cos(azimuth),
            np.cos(inclination) * np.sin(azimuth),
            np.sin(inclination),
        ], axis=1)
        return rings, columns, directions

    def image_directions(self) -> np.ndarray:
        """按距离图像 (行, 列) 排列的射线方向，shape (H, W, 3)"""
        rings, columns, directions = self.ray_grid()
        grid = np.zeros((self.channels, self.columns, 3))
        grid[ring_to_row(rings, self.channels), columns] = directions
        return grid


@dataclass(frozen=True)
class CameraIntrinsics:
    """由视场角推导的针孔内参"""
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float, vfov_deg: float) -> "CameraIntrinsics":
        if not (0.0 < hfov_deg < 180.0 and 0.0 < vfov_deg < 180.0):
            raise DataValidationError("camera FOV must lie in (0°, 180°)")
        return cls(
            width=width,
            height=height,
            fx=(width / 2.0) / np.tan(np.deg2rad(hfov_deg) / 2.0),
            fy=(height / 2.0) / np.tan(np.deg2rad(vfov_deg) / 2.0),
            cx=width / 2.0,
            cy=height / 2.0,
        )

    def pixel_rays(self) -> np.ndarray:
        """相机坐标系（x 为光轴）下各像素的射线，首分量为 1，shape (H, W, 3)"""
        u, v = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack([
            np.ones(u.shape),
            -(u + 0.5 - self.cx) / self.fx,
            -(v + 0.5 - self.cy) / self.fy,
        ], axis=-1)


@dataclass(frozen=True, eq=False)
class DepthCameraModel:
    """160×120 深度相机，默认挂载在基座上方 0.35 m、下俯 30°"""
    mount: Pose = field(default_factory=lambda: Pose.from_xyz_rpy(0.0, 0.0, 0.35, pitch=np.deg2rad(30.0)))
    hfov_deg: float = 87.0
    vfov_deg: float = 58.0
    width: int = DEPTH_WIDTH
    height: int = DEPTH_HEIGHT
    max_range: float = 6.0

    def __post_init__(self):
        if (self.width, self.height) != (DEPTH_WIDTH, DEPTH_HEIGHT):
            raise ShapeError(f"depth camera resolution is fixed at 160x120, got {self.width}x{self.height}")
        if not (0.0 < self.hfov_deg < 180.0 and 0.0 < self.vfov_deg < 180.0):
            raise DataValidationError("camera FOV must lie in (0°, 180°)")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.width, self.height, self.hfov_deg, self.vfov_deg)


class DepthImage(MaskedImage):
    """z 深度图（沿光轴的距离，米）"""


def lidar_scan(model: LidarModel, base_pose: Pose, field: HeightField) -> PointCloud:
    """一次 LiDAR 扫描；命中点以传感器坐标系返回，未命中的射线省略"""
    sensor_pose = base_pose.compose(model.mount)
    rings, columns, directions = model.ray_grid()
    world_directions = directions @ sensor_pose.rotation.T
    t = raycast_batch(field, sensor_pose.position, world_directions, model.max_range)
    hit = ~np.isnan(t)
    points = directions[hit] * t[hit, None]
    return PointCloud(points, rings[hit], columns[hit])


def depth_render(model: DepthCameraModel, base_pose: Pose, field: HeightField,
                 clip_min: float = CLIP_MIN, clip_max: float = CLIP_MAX) -> DepthImage:
    """逐像素针孔投射；存 z 深度，超出上限截断为上限，低于下限或未命中为无效"""
    camera_pose = base_pose.compose(model.mount)
    rays = model.intrinsics.pixel_rays().reshape(-1, 3)
    lengths = np.linalg.norm(rays, axis=1)
    unit = rays / lengths[:, None]
    t = raycast_batch(field, camera_pose.position, unit @ camera_pose.rotation.T, model.max_range)

    depth = t / lengths
    hit = ~np.isnan(depth)
    valid = hit & (depth >= clip_min)
    values = np.where(valid, np.minimum(depth, clip_max), 0.0)
    shape = (model.height, model.width)
    return DepthImage(values.reshape(shape), valid.reshape(shape))


def depth_to_points(model: DepthCameraModel, image: DepthImage, base_pose: Optional[Pose] = None,
                    exclude_clamped: bool = True, clip_max: float = CLIP_MAX) -> np.ndarray:
    """
    深度图反投影为点

    base_pose 为空时返回基座坐标系，否则返回世界坐标系。
    exclude_clamped 剔除被截断到上限的像素（并非真实表面）。
    """
    if image.shape != (model.height, model.width):
        raise ShapeError(f"depth image shape {image.shape} does not match the camera")
    mask = image.valid.copy()
    if exclude_clamped:
        mask &= image.values < clip_max
    rays = model.intrinsics.pixel_rays()[mask]
    points = model.mount.transform_points(rays * image.values[mask][:, None])
    if base_pose is not None:
        points = base_pose.transform_points(points)
    return points


def corrupt(image: Union[DepthImage, RangeImage], seed: int, noise_sigma: float,
            max_occlusion_fraction: float, clip_min: float = CLIP_MIN, clip_max: float = CLIP_MAX):
    """
    高斯噪声 + 1-3 个随机轴对齐椭圆遮挡

    同一 seed 结果逐位一致；遮挡总面积不超过 max_occlusion_fraction·像素数。
    """
    if noise_sigma < 0:
        raise DataValidationError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if not 0.0 <= max_occlusion_fraction <= 0.2:
        raise DataValidationError(f"max_occlusion_fraction must lie in [0, 0.2], got {max_occlusion_fraction}")

    rng = np.random.default_rng(seed)
    values = image.values.copy()
    valid = image.valid.copy()

    if noise_sigma > 0:
        noise = rng.normal(0.0, noise_sigma, size=values.shape)
        values = np.where(valid, values + noise, 0.0)
        valid &= values >= clip_min
        values = np.minimum(values, clip_max)

    if max_occlusion_fraction > 0:
        occluded = _occlusion_mask(rng, image.shape, max_occlusion_fraction)
        valid &= ~occluded

    return image.with_values(np.where(valid, values, 0.0), valid)


def _occlusion_mask(rng: np.random.Generator, shape: Tuple[int, int], fraction: float) -> np.ndarray:
    height, width = shape
    budget = fraction * height * width
    count = int(rng.integers(1, 4))
    rows, cols = np.mgrid[0:height, 0:width]

    ellipses = []
    for _ in range(count):
        area = budget / count * rng.uniform(0.3, 1.0)
        aspect = rng.uniform(0.5, 2.0)
        a = np.sqrt(area * aspect / np.pi)
        b = area / (np.pi * a)
        ellipses.append((rng.uniform(0, height), rng.uniform(0, width), a, b))

    # 离散化后并集可能略超预算，整体收缩半轴直到满足
    scale = 1.0
    while True:
        mask = np.zeros(shape, dtype=bool)
        for center_r, center_c, a, b in ellipses:
            mask |= (((rows + 0.5 - center_r) / (a * scale)) ** 2
                     + ((cols + 0.5 - center_c) / (b * scale)) ** 2) <= 1.0
        if mask.sum() <= budget:
            return mask
        scale *= 0.9
