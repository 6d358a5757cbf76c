"""
heightmap-eds 几何融合基线
世界坐标滚动高程缓冲：逐帧取格内最高点，再做 α=0.5 的指数滑动平均；
查询时对已观测格做双线性插值，得到与网络输出同格式的高程图。
"""
import logging
from typing import Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from tools.geometry import Pose
from tools.heightmap import Heightmap, HeightmapSpec, grid_points
from tools.range_image import CLIP_MAX, RangeImage
from tools.sensors import DepthCameraModel, DepthImage, LidarModel, depth_to_points

logger = logging.getLogger(__name__)

BUFFER_SIZE_M = 6.0
BUFFER_CELL = 0.02
EMA_ALPHA = 0.5


class ElevationBuffer:
    """
    以机器人为中心的 6 m × 6 m 世界系网格，2 cm 分辨率

    格 k 覆盖 [k·c, (k+1)·c)，格心为 (k + 0.5)·c；重新居中只按整格平移。
    """

    def __init__(self, size_m: float = BUFFER_SIZE_M, cell: float = BUFFER_CELL, alpha: float = EMA_ALPHA):
        self.cell = cell
        self.alpha = alpha
        self.cells = int(round(size_m / cell))
        shape = (self.cells, self.cells)
        self.elevation = np.zeros(shape)
        self.weight = np.zeros(shape)
        self.last_update = np.full(shape, -1, dtype=np.int64)
        self.origin_cell = np.array([-self.cells // 2, -self.cells // 2], dtype=np.int64)

    @property
    def observed(self) -> np.ndarray:
        return self.weight > 0

    def recenter(self, x: float, y: float):
        """把缓冲中心移到 (x, y) 所在格；移出的格丢弃，移入的格未观测"""
        center = np.floor(np.array([x, y]) / self.cell).astype(np.int64)
        new_origin = center - self.cells // 2
        shift = new_origin - self.origin_cell
        if not shift.any():
            return
        self.elevation = _shift(self.elevation, shift, 0.0)
        self.weight = _shift(self.weight, shift, 0.0)
        self.last_update = _shift(self.last_update, shift, -1)
        self.origin_cell = new_origin
        logger.debug(f"缓冲重新居中，平移 {shift.tolist()} 格")

    def integrate(self, points_world: np.ndarray, timestep: int):
        """融合一帧世界系点云"""
        points_world = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
        if len(points_world) == 0:
            return
        idx = np.floor(points_world[:, :2] / self.cell).astype(np.int64) - self.origin_cell
        inside = np.all((idx >= 0) & (idx < self.cells), axis=1)
        if not inside.any():
            return
        idx = idx[inside]
        candidate = np.full(self.elevation.shape, -np.inf)
        np.maximum.at(candidate, (idx[:, 0], idx[:, 1]), points_world[inside, 2])

        touched = np.isfinite(candidate)
        fresh = touched & ~self.observed
        seen = touched & self.observed
        self.elevation[fresh] = candidate[fresh]
        self.elevation[seen] = self.alpha * candidate[seen] + (1.0 - self.alpha) * self.elevation[seen]
        self.weight[touched] += 1.0
        self.last_update[touched] = timestep

    def query(self, spec: HeightmapSpec, base_pose: Pose) -> Tuple[Heightmap, np.ndarray]:
        """
        在高程图网格点处查询，返回 (高程图, 覆盖掩码)

        四个相邻格心中只用已观测者并重新归一化权重；一个都没有时
        取最近已观测格的估计并标记为未覆盖。缓冲完全为空时退化为世界高度 0。
        """
        points = grid_points(spec, base_pose)
        heights = np.zeros(len(points))
        coverage = np.zeros(len(points), dtype=bool)
        observed = self.observed
        if not observed.any():
            return Heightmap(spec, heights - base_pose.position[2]), coverage

        u = points[:, 0] / self.cell - 0.5 - self.origin_cell[0]
        v = points[:, 1] / self.cell - 0.5 - self.origin_cell[1]
        i0 = np.floor(u).astype(np.int64)
        j0 = np.floor(v).astype(np.int64)
        fu = u - i0
        fv = v - j0

        total = np.zeros(len(points))
        accum = np.zeros(len(points))
        for di, dj, w in ((0, 0, (1 - fu) * (1 - fv)), (1, 0, fu * (1 - fv)),
                          (0, 1, (1 - fu) * fv), (1, 1, fu * fv)):
            i = i0 + di
            j = j0 + dj
            inside = (i >= 0) & (i < self.cells) & (j >= 0) & (j < self.cells)
            ok = np.zeros(len(points), dtype=bool)
            ok[inside] = observed[i[inside], j[inside]]
            weight = np.where(ok, w, 0.0)
            total += weight
            accum[ok] += weight[ok] * self.elevation[i[ok], j[ok]]

        coverage = total > 1e-12
        heights[coverage] = accum[coverage] / total[coverage]
        if not coverage.all():
            cells = np.argwhere(observed)
            tree = cKDTree(cells.astype(np.float64))
            _, nearest = tree.query(np.stack([u[~coverage], v[~coverage]], axis=1))
            heights[~coverage] = self.elevation[cells[nearest, 0], cells[nearest, 1]]
        return Heightmap(spec, heights - base_pose.position[2]), coverage


def _shift(array: np.ndarray, shift: np.ndarray, fill) -> np.ndarray:
    """按整格平移：new[i, j] = old[i + sx, j + sy]"""
    out = np.full_like(array, fill)
    n0, n1 = array.shape
    sx, sy = int(shift[0]), int(shift[1])
    if abs(sx) >= n0 or abs(sy) >= n1:
        return out
    src_x = slice(max(sx, 0), n0 + min(sx, 0))
    dst_x = slice(max(-sx, 0), n0 + min(-sx, 0))
    src_y = slice(max(sy, 0), n1 + min(sy, 0))
    dst_y = slice(max(-sy, 0), n1 + min(-sy, 0))
    out[dst_x, dst_y] = array[src_x, src_y]
    return out


def lidar_points_world(model: LidarModel, base_pose: Pose, image: RangeImage,
                       measured: Optional[np.ndarray] = None, clip_max: float = CLIP_MAX) -> np.ndarray:
    """
    距离图像中实测且未被截断的像素 → 世界系点

    用真实线束倾角而非格心角度重建方向。
    """
    mask = image.valid if measured is None else (image.valid & measured)
    mask = mask & (image.values < clip_max)
    directions = model.image_directions()[mask]
    points = directions * image.values[mask][:, None]
    return base_pose.compose(model.mount).transform_points(points)


def points_from_observation(depth_model: DepthCameraModel, lidar_model: LidarModel, base_pose: Pose,
                            depth: Optional[DepthImage], lidar: Optional[RangeImage],
                            lidar_measured: Optional[np.ndarray] = None) -> np.ndarray:
    """一帧观测（深度 + LiDAR）转为世界系点云"""
    parts = [np.zeros((0, 3))]
    if depth is not None:
        parts.append(depth_to_points(depth_model, depth, base_pose))
    if lidar is not None:
        parts.append(lidar_points_world(lidar_model, base_pose, lidar, lidar_measured))
    return np.concatenate(parts, axis=0)


def run_oracle(episode, spec: HeightmapSpec, depth_model: DepthCameraModel,
               lidar_model: LidarModel, use_depth: bool = True, use_lidar: bool = True) -> np.ndarray:
    """对整段轨迹逐帧融合并查询，返回 (T, nx·ny) 预测"""
    buffer = ElevationBuffer()
    predictions = np.zeros((episode.steps, spec.size))
    for t in range(episode.steps):
        pose = episode.pose(t)
        buffer.recenter(pose.position[0], pose.position[1])
        points = points_from_observation(
            depth_model, lidar_model, pose,
            episode.depth_image(t) if use_depth else None,
            episode.range_image(t) if use_lidar else None,
            episode.lidar_measured[t] if use_lidar else None,
        )
        buffer.integrate(points, t)
        heightmap, _ = buffer.query(spec, pose)
        predictions[t] = heightmap.values
    return predictions
