"""
heightmap-eds 程序化地形生成
可复现的 SplitMix64 随机源 + 各类地形（平地、坡、楼梯、台阶、粗糙、组合）
"""
import logging
from dataclasses import dataclass, replace
from typing import List, Tuple

import numpy as np

from errors import DataValidationError
from tools.geometry import HeightField, TerrainKind, TERRAIN_ORDER

logger = logging.getLogger(__name__)

# 地形网格分辨率 (m)，细于研究中的最细高程图分辨率 (6 cm)
TERRAIN_CELL_SIZE = 0.02

MASK64 = (1 << 64) - 1
SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
SPLITMIX_MUL1 = 0xBF58476D1CE4E5B9
SPLITMIX_MUL2 = 0x94D049BB133111EB
# 格点哈希中 y 方向的扰动常数
LATTICE_Y_MUL = 0xC2B2AE3D27D4EB4F


class SplitMix64:
    """
    64 位 SplitMix 生成器

    state ← state + 0x9E3779B97F4A7C15；
    z ← (z ⊕ z>>30)·0xBF58476D1CE4E5B9；z ← (z ⊕ z>>27)·0x94D049BB133111EB；
    输出 z ⊕ z>>31（全部按 2^64 取模）。
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + SPLITMIX_GAMMA) & MASK64
        return _splitmix_finalize(self.state)

    def next_float(self) -> float:
        """[0, 1) 上的 53 位均匀浮点数"""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.next_float()


def _splitmix_finalize(z: int) -> int:
    z = ((z ^ (z >> 30)) * SPLITMIX_MUL1) & MASK64
    z = ((z ^ (z >> 27)) * SPLITMIX_MUL2) & MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, index: int) -> int:
    """第 index 个子种子 = SplitMix64(master_seed) 的第 index 个输出（从 0 计）"""
    return SplitMix64((master_seed + index * SPLITMIX_GAMMA) & MASK64).next_u64()


def lattice_hash(seed: int, ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
    """整数格点 → [0, 1) 均匀值，向量化的 SplitMix 终结函数"""
    ix = np.asarray(ix, dtype=np.int64).astype(np.uint64)
    iy = np.asarray(iy, dtype=np.int64).astype(np.uint64)
    # uint64 数组运算按 2^64 回绕
    z = (np.uint64(seed & MASK64) + ix * np.uint64(SPLITMIX_GAMMA) + iy * np.uint64(LATTICE_Y_MUL)
         + np.uint64(SPLITMIX_GAMMA))
    z = (z ^ (z >> np.uint64(30))) * np.uint64(SPLITMIX_MUL1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(SPLITMIX_MUL2)
    z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


@dataclass(frozen=True)
class TerrainSpec:
    """地形生成参数"""
    kind: TerrainKind
    seed: int
    footprint: Tuple[float, float] = (12.0, 12.0)
    stair_rise: float = 0.15
    stair_run: float = 0.30
    step_height_range: Tuple[float, float] = (0.05, 0.15)
    step_size: float = 0.4
    roughness_amplitude: float = 0.04
    roughness_correlation: float = 0.3
    slope_grade: float = 0.15

    def validate(self):
        """检查参数范围"""
        if self.footprint[0] < 4.0 or self.footprint[1] < 4.0:
            raise DataValidationError(f"Terrain footprint must be at least 4 m x 4 m, got {self.footprint}")
        if not 0.0 < self.stair_rise <= 0.25:
            raise DataValidationError(f"stair_rise must lie in (0, 0.25], got {self.stair_rise}")
        if self.stair_run <= 0.0:
            raise DataValidationError(f"stair_run must be positive, got {self.stair_run}")
        if not 0.0 <= self.roughness_amplitude <= 0.15:
            raise DataValidationError(f"roughness_amplitude must lie in [0, 0.15], got {self.roughness_amplitude}")
        if self.roughness_correlation <= 0.0:
            raise DataValidationError("roughness_correlation must be positive")
        low, high = self.step_height_range
        if low < 0.0 or high < low:
            raise DataValidationError(f"Invalid step_height_range {self.step_height_range}")
        if self.step_size <= 0.0:
            raise DataValidationError("step_size must be positive")
        if abs(self.slope_grade) > 1.0:
            raise DataValidationError(f"slope_grade must lie in [-1, 1], got {self.slope_grade}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "seed": self.seed,
            "footprint": list(self.footprint),
            "stair_rise": self.stair_rise,
            "stair_run": self.stair_run,
            "step_height_range": list(self.step_height_range),
            "step_size": self.step_size,
            "roughness_amplitude": self.roughness_amplitude,
            "roughness_correlation": self.roughness_correlation,
            "slope_grade": self.slope_grade,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TerrainSpec":
        return cls(
            kind=TerrainKind(data["kind"]),
            seed=int(data["seed"]),
            footprint=tuple(data["footprint"]),
            stair_rise=data["stair_rise"],
            stair_run=data["stair_run"],
            step_height_range=tuple(data["step_height_range"]),
            step_size=data["step_size"],
            roughness_amplitude=data["roughness_amplitude"],
            roughness_correlation=data["roughness_correlation"],
            slope_grade=data["slope_grade"],
        )


def generate(spec: TerrainSpec) -> HeightField:
    """按规格生成地形；相同 (kind, seed, 参数) 结果逐位相同"""
    spec.validate()
    nx = int(round(spec.footprint[0] / TERRAIN_CELL_SIZE))
    ny = int(round(spec.footprint[1] / TERRAIN_CELL_SIZE))
    origin = (-nx * TERRAIN_CELL_SIZE / 2.0, -ny * TERRAIN_CELL_SIZE / 2.0)
    xs = origin[0] + (np.arange(nx) + 0.5) * TERRAIN_CELL_SIZE
    ys = origin[1] + (np.arange(ny) + 0.5) * TERRAIN_CELL_SIZE
    x, y = np.meshgrid(xs, ys, indexing="ij")

    elevations = _elevations(spec, spec.kind, x, y)
    logger.debug(f"Generated {spec.kind.value} terrain seed={spec.seed} "
                 f"range=[{elevations.min():.3f}, {elevations.max():.3f}]")
    return HeightField(origin_xy=origin, cell_size=TERRAIN_CELL_SIZE,
                       elevations=elevations, terrain_kind=spec.kind)


def _elevations(spec: TerrainSpec, kind: TerrainKind, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if kind == TerrainKind.FLAT:
        return np.zeros_like(x)
    if kind == TerrainKind.SLOPE:
        return spec.slope_grade * x
    if kind == TerrainKind.STAIRS_UP:
        return spec.stair_rise * np.floor(x / spec.stair_run)
    if kind == TerrainKind.STAIRS_DOWN:
        return -spec.stair_rise * np.floor(x / spec.stair_run)
    if kind == TerrainKind.STEPS:
        return _discrete_steps(spec, x, y)
    if kind == TerrainKind.ROUGH:
        return _value_noise(spec.seed, x, y, spec.roughness_amplitude, spec.roughness_correlation)
    if kind == TerrainKind.COMPOSITE:
        return _composite(spec, x, y)
    raise DataValidationError(f"Unsupported terrain kind {kind}")


def _discrete_steps(spec: TerrainSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """方块台阶：每个 step_size 方格一个随机高度"""
    low, high = spec.step_height_range
    bx = np.floor(x / spec.step_size)
    by = np.floor(y / spec.step_size)
    return low + (high - low) * lattice_hash(spec.seed, bx, by)


def _value_noise(seed: int, x: np.ndarray, y: np.ndarray, amplitude: float, correlation: float) -> np.ndarray:
    """格点值噪声：粗格点上的均匀随机值做双线性插值，幅值有界 ±amplitude"""
    gx = x / correlation
    gy = y / correlation
    ix = np.floor(gx)
    iy = np.floor(gy)
    fx = gx - ix
    fy = gy - iy

    def corner(dx, dy):
        return amplitude * (2.0 * lattice_hash(seed, ix + dx, iy + dy) - 1.0)

    return ((1 - fx) * (1 - fy) * corner(0, 0) + fx * (1 - fy) * corner(1, 0)
            + (1 - fx) * fy * corner(0, 1) + fx * fy * corner(1, 1))


def _composite(spec: TerrainSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """四象限拼接：平地 → 台阶 → 楼梯 → 粗糙"""
    z = np.zeros_like(x)
    steps_spec = replace(spec, seed=derive_seed(spec.seed, 1))
    rough_seed = derive_seed(spec.seed, 2)

    steps_mask = (x >= 0) & (y < 0)
    stairs_mask = (x < 0) & (y >= 0)
    rough_mask = (x >= 0) & (y >= 0)

    z[steps_mask] = _discrete_steps(steps_spec, x[steps_mask], y[steps_mask])
    # 楼梯从象限边界开始向 -x 方向下降，使边界处与平地相接
    z[stairs_mask] = spec.stair_rise * np.floor(x[stairs_mask] / spec.stair_run + 1.0)
    z[rough_mask] = _value_noise(rough_seed, x[rough_mask], y[rough_mask],
                                 spec.roughness_amplitude, spec.roughness_correlation)
    return z


def sampled_spec(kind: TerrainKind, seed: int, footprint: float = 12.0) -> TerrainSpec:
    """由 seed 抽取单个地形的参数（台阶高 0.10-0.17 m、踏步 0.28-0.35 m 等）"""
    rng = SplitMix64(seed)
    step_low = rng.uniform(0.03, 0.06)
    return TerrainSpec(
        kind=kind,
        seed=seed,
        footprint=(footprint, footprint),
        stair_rise=rng.uniform(0.10, 0.17),
        stair_run=rng.uniform(0.28, 0.35),
        step_height_range=(step_low, step_low + rng.uniform(0.04, 0.10)),
        step_size=rng.uniform(0.3, 0.6),
        roughness_amplitude=rng.uniform(0.02, 0.06),
        roughness_correlation=rng.uniform(0.2, 0.5),
        slope_grade=rng.uniform(-0.2, 0.2),
    )


def suite_specs(master_seed: int, count_per_kind: int, footprint: float = 12.0) -> List[TerrainSpec]:
    """地形集合的规格列表：按 TERRAIN_ORDER 分组，每类 count_per_kind 个"""
    if count_per_kind < 1:
        raise DataValidationError(f"count_per_kind must be >= 1, got {count_per_kind}")
    return [
        sampled_spec(kind, derive_seed(master_seed, kind_index * count_per_kind + k), footprint)
        for kind_index, kind in enumerate(TERRAIN_ORDER)
        for k in range(count_per_kind)
    ]


def terrain_suite(master_seed: int, count_per_kind: int, footprint: float = 12.0) -> List[HeightField]:
    """均衡的地形集合（7 类 × count_per_kind）"""
    specs = suite_specs(master_seed, count_per_kind, footprint)
    fields = [generate(spec) for spec in specs]
    logger.info(f"Generated terrain suite: {len(fields)} fields from master seed {master_seed}")
    return fields
