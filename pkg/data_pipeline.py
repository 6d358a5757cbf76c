"""
heightmap-eds 数据管道
运动学轨迹仿真 → 传感器渲染 → 真值高程图 → EPIS 容器 + manifest，按 episode 划分 70/15/15
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from config import EpisodeConfig, RunConfig, SensorConfig, settings, write_resolved_config
from errors import DataValidationError, EmptyInputError, FormatError
from storage import formats
from tools.geometry import HeightField, Pose, TerrainKind
from tools.heightmap import FLATTENING_ORDER, HeightmapSpec, extract_ground_truth
from tools.range_image import RangeImage, preprocess_with_mask
from tools.sensors import (
    DepthCameraModel, DepthImage, LidarModel, depth_render, lidar_scan,
)
from tools.terrain import TerrainSpec, derive_seed, generate, suite_specs

logger = logging.getLogger(__name__)

STEP_SECONDS = 0.1
SPLITS = ("train", "val", "test")


class PipelineStage(Enum):
    """管道阶段枚举"""
    TERRAIN_GENERATION = "terrain_generation"
    SIMULATION = "simulation"
    SERIALIZATION = "serialization"
    SPLIT = "split"
    COMPLETION = "completion"


@dataclass
class PipelineMetrics:
    """管道性能指标"""
    stage: PipelineStage
    start_time: float
    end_time: Optional[float] = None
    items_processed: int = 0
    success_count: int = 0
    error_count: int = 0
    warning_count: int = 0
    error_details: List[str] = field(default_factory=list)

    @property
    def duration(self) -> float:
        """计算持续时间"""
        if self.end_time is None:
            return time.time() - self.start_time
        return self.end_time - self.start_time

    @property
    def success_rate(self) -> float:
        total = self.success_count + self.error_count
        if total == 0:
            return 0.0
        return self.success_count / total


def build_sensor_models(sensors: SensorConfig) -> Tuple[LidarModel, DepthCameraModel]:
    """由配置构建两个传感器模型"""
    lidar = LidarModel(mount=Pose.from_xyz_rpy(0.0, 0.0, sensors.lidar_mount_height,
                                             roll=np.deg2rad(sensors.lidar_mount_roll_deg)),
                       max_range=sensors.lidar_max_range)
    camera = DepthCameraModel(
        mount=Pose.from_xyz_rpy(0.0, 0.0, sensors.camera_mount_height, pitch=np.deg2rad(sensors.camera_pitch_deg)),
        hfov_deg=sensors.camera_hfov_deg,
        vfov_deg=sensors.camera_vfov_deg,
        max_range=sensors.camera_max_range,
    )
    return lidar, camera


def heightmap_spec_from(config: RunConfig) -> HeightmapSpec:
    hm = config.heightmap
    return HeightmapSpec(hm.length, hm.width, hm.resolution, hm.forward_offset)


# ---------------------------------------------------------------------------- 轨迹与状态

def simulate_trajectory(field: HeightField, seed: int, steps: int,
                        episode_cfg: Optional[EpisodeConfig] = None) -> Tuple[List[Pose], int]:
    """
    运动学基座轨迹，返回 (位姿序列, 反射次数)

    从地形中心出发，朝向随机；每段 1-2 s 重新采样偏航角速度；
    即将进入边缘 edge_margin 范围时航向反转 180°。
    """
    cfg = episode_cfg or EpisodeConfig()
    rng = np.random.default_rng(seed)
    x_min, x_max, y_min, y_max = field.footprint
    x = (x_min + x_max) / 2.0
    y = (y_min + y_max) / 2.0
    heading = rng.uniform(-np.pi, np.pi)
    speed = rng.uniform(*cfg.speed_range)
    yaw_rate = 0.0
    segment_left = 0.0
    reflections = 0

    poses = []
    attitude_sigma = np.deg2rad(cfg.attitude_jitter_deg)
    for _ in range(steps):
        z = field.height_at(x, y) + cfg.nominal_base_height + rng.normal(0.0, cfg.height_jitter)
        roll, pitch = rng.normal(0.0, attitude_sigma, size=2)
        poses.append(Pose.from_xyz_rpy(x, y, z, roll=roll, pitch=pitch, yaw=heading))

        if segment_left <= 0.0:
            yaw_rate = rng.uniform(-cfg.yaw_rate_max, cfg.yaw_rate_max)
            segment_left = rng.uniform(*cfg.segment_seconds)
        segment_left -= STEP_SECONDS
        heading = _wrap_angle(heading + yaw_rate * STEP_SECONDS)
        next_x = x + speed * np.cos(heading) * STEP_SECONDS
        next_y = y + speed * np.sin(heading) * STEP_SECONDS
        if not _inside(next_x, next_y, field, cfg.edge_margin):
            heading = _wrap_angle(heading + np.pi)
            reflections += 1
            next_x = x + speed * np.cos(heading) * STEP_SECONDS
            next_y = y + speed * np.sin(heading) * STEP_SECONDS
            if not _inside(next_x, next_y, field, cfg.edge_margin):
                # 角落处反向后仍越界：原地停一步
                next_x, next_y = x, y
        x, y = next_x, next_y
    if reflections:
        logger.warning(f"轨迹接近地形边缘，航向反转 {reflections} 次 (seed={seed})")
    return poses, reflections


def _inside(x: float, y: float, field: HeightField, margin: float) -> bool:
    x_min, x_max, y_min, y_max = field.footprint
    return x_min + margin <= x <= x_max - margin and y_min + margin <= y <= y_max - margin


def _wrap_angle(angle: float) -> float:
    return float((angle + np.pi) % (2.0 * np.pi) - np.pi)


def robot_states(poses: Sequence[Pose], dt: float = STEP_SECONDS) -> np.ndarray:
    """
    15 维机器人状态：机体系线速度 (3)、机体系角速度 (3)、相对起点位置 (3)、R 前两列 (6)

    速度由位姿差分得到；t=0 使用前向差分。
    """
    count = len(poses)
    states = np.zeros((count, 15))
    if count == 0:
        return states
    origin = poses[0].position
    for t, pose in enumerate(poses):
        if count == 1:
            linear = np.zeros(3)
            angular = np.zeros(3)
        else:
            a, b = (poses[t - 1], pose) if t > 0 else (pose, poses[1])
            linear = pose.rotation.T @ ((b.position - a.position) / dt)
            angular = Rotation.from_matrix(a.rotation.T @ b.rotation).as_rotvec() / dt
        states[t, 0:3] = linear
        states[t, 3:6] = angular
        states[t, 6:9] = pose.position - origin
        states[t, 9:12] = pose.rotation[:, 0]
        states[t, 12:15] = pose.rotation[:, 1]
    return states


# ---------------------------------------------------------------------------- Episode

@dataclass(eq=False)
class Episode:
    """一段 10 Hz 轨迹的全部观测与真值"""
    episode_id: str
    terrain_index: int
    terrain_kind: TerrainKind
    seed: int
    positions: np.ndarray
    rotations: np.ndarray
    states: np.ndarray
    depth: np.ndarray
    depth_valid: np.ndarray
    lidar: np.ndarray
    lidar_valid: np.ndarray
    lidar_measured: np.ndarray
    heightmaps: np.ndarray
    dt: float = STEP_SECONDS
    empty_scans: int = 0

    @property
    def steps(self) -> int:
        return len(self.positions)

    @property
    def duration(self) -> float:
        return self.steps * self.dt

    def pose(self, t: int) -> Pose:
        return Pose(self.positions[t], self.rotations[t])

    def depth_image(self, t: int) -> DepthImage:
        return DepthImage(self.depth[t].astype(np.float64), self.depth_valid[t])

    def range_image(self, t: int) -> RangeImage:
        return RangeImage(self.lidar[t].astype(np.float64), self.lidar_valid[t])

    def normalized_depth(self, scale: float = settings.RANGE_SCALE) -> np.ndarray:
        return np.where(self.depth_valid, self.depth / scale, 0.0).astype(np.float32)

    def normalized_lidar(self, scale: float = settings.RANGE_SCALE) -> np.ndarray:
        return np.where(self.lidar_valid, self.lidar / scale, 0.0).astype(np.float32)

    def header(self) -> Dict[str, Any]:
        return {
            "episode_id": self.episode_id,
            "terrain_index": self.terrain_index,
            "terrain_kind": self.terrain_kind.value,
            "seed": self.seed,
            "steps": self.steps,
            "dt": self.dt,
            "empty_scans": self.empty_scans,
        }

    def save(self, path: Path):
        records = []
        for t in range(self.steps):
            records.append({
                "position": self.positions[t],
                "rotation": self.rotations[t],
                "state": self.states[t],
                "depth": self.depth[t],
                "depth_valid": self.depth_valid[t],
                "lidar": self.lidar[t],
                "lidar_valid": self.lidar_valid[t],
                "lidar_measured": self.lidar_measured[t],
                "heightmap": self.heightmaps[t],
            })
        formats.save_episode(path, self.header(), records)

    @classmethod
    def load(cls, path: Path) -> "Episode":
        header, records = formats.load_episode_records(path)
        if len(records) != header.get("steps"):
            raise FormatError(f"{path}: header announces {header.get('steps')} steps, found {len(records)}")

        def stack(name, dtype=None):
            try:
                array = np.stack([record[name] for record in records])
            except KeyError as e:
                raise FormatError(f"{path}: step record missing {e}") from e
            return array.astype(dtype) if dtype is not None else array

        return cls(
            episode_id=header["episode_id"],
            terrain_index=header["terrain_index"],
            terrain_kind=TerrainKind(header["terrain_kind"]),
            seed=header["seed"],
            positions=stack("position"),
            rotations=stack("rotation"),
            states=stack("state"),
            depth=stack("depth"),
            depth_valid=stack("depth_valid", bool),
            lidar=stack("lidar"),
            lidar_valid=stack("lidar_valid", bool),
            lidar_measured=stack("lidar_measured", bool),
            heightmaps=stack("heightmap"),
            dt=header["dt"],
            empty_scans=header.get("empty_scans", 0),
        )


def simulate_episode(field: HeightField, seed: int, steps: int, config: Optional[RunConfig] = None,
                     episode_id: str = "ep00000", terrain_index: int = 0) -> Episode:
    """仿真一段轨迹：位姿、状态、深度图、预处理后的距离图像、真值高程图"""
    config = config or RunConfig()
    if steps < 1:
        raise DataValidationError(f"episode needs at least one step, got {steps}")
    lidar_model, camera_model = build_sensor_models(config.sensors)
    spec = heightmap_spec_from(config)
    sensors = config.sensors
    poses, _ = simulate_trajectory(field, seed, steps, config.episodes)

    depth = np.zeros((steps, camera_model.height, camera_model.width), dtype=np.float32)
    depth_valid = np.zeros(depth.shape, dtype=bool)
    lidar = np.zeros((steps, lidar_model.channels, lidar_model.columns), dtype=np.float32)
    lidar_valid = np.zeros(lidar.shape, dtype=bool)
    lidar_measured = np.zeros(lidar.shape, dtype=bool)
    heightmaps = np.zeros((steps, spec.size), dtype=np.float32)
    empty_scans = 0

    for t, pose in enumerate(poses):
        image = depth_render(camera_model, pose, field, sensors.clip_min, sensors.clip_max)
        depth[t] = image.values
        depth_valid[t] = image.valid

        cloud = lidar_scan(lidar_model, pose, field)
        try:
            scan, measured = preprocess_with_mask(cloud, sensors.clip_min, sensors.clip_max, sensors.max_gap)
            lidar[t] = scan.values
            lidar_valid[t] = scan.valid
            lidar_measured[t] = measured
        except EmptyInputError:
            # 全部未命中：保留全无效图像
            empty_scans += 1
        heightmaps[t] = extract_ground_truth(spec, pose, field).values

    if empty_scans:
        logger.warning(f"{episode_id}: {empty_scans}/{steps} 帧 LiDAR 无有效回波，使用全无效距离图像")

    return Episode(
        episode_id=episode_id,
        terrain_index=terrain_index,
        terrain_kind=field.terrain_kind,
        seed=seed,
        positions=np.stack([p.position for p in poses]),
        rotations=np.stack([p.rotation for p in poses]),
        states=robot_states(poses).astype(np.float32),
        depth=depth,
        depth_valid=depth_valid,
        lidar=lidar,
        lidar_valid=lidar_valid,
        lidar_measured=lidar_measured,
        heightmaps=heightmaps,
        empty_scans=empty_scans,
    )


# ---------------------------------------------------------------------------- 划分与 manifest

def split_counts(count: int, ratios: Sequence[float] = (0.70, 0.15, 0.15)) -> Tuple[int, int, int]:
    """训练集四舍五入，余下按比例分给验证/测试，并列时验证集多一个"""
    n_train = int(math.floor(ratios[0] * count + 0.5))
    rest = count - n_train
    tail = ratios[1] + ratios[2]
    n_val = int(math.ceil(rest * ratios[1] / tail - 1e-9)) if tail > 0 else 0
    return n_train, n_val, rest - n_val


def split_episodes(episode_ids: Sequence[str], seed: int,
                   ratios: Sequence[float] = (0.70, 0.15, 0.15)) -> Dict[str, List[str]]:
    """按 episode 的随机划分（seed 决定排列）"""
    n_train, n_val, _ = split_counts(len(episode_ids), ratios)
    order = np.random.default_rng(seed).permutation(len(episode_ids))
    shuffled = [episode_ids[i] for i in order]
    return {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train:n_train + n_val]),
        "test": sorted(shuffled[n_train + n_val:]),
    }


@dataclass
class DatasetManifest:
    """数据集描述：划分、地形种子、几何与归一化常数"""
    episodes: List[Dict[str, Any]]
    splits: Dict[str, List[str]]
    terrains: List[Dict[str, Any]]
    heightmap: Dict[str, Any]
    sensors: Dict[str, Any]
    steps: int
    dt: float = STEP_SECONDS
    normalization: Dict[str, float] = field(default_factory=lambda: {
        "range_scale": settings.RANGE_SCALE,
        "heightmap_offset": settings.NOMINAL_BASE_HEIGHT,
        "invalid_value": 0.0,
    })
    flattening: str = FLATTENING_ORDER
    schema_version: int = formats.MANIFEST_SCHEMA_VERSION
    tool_version: str = settings.VERSION
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def episode_count(self) -> int:
        return len(self.episodes)

    @property
    def sample_count(self) -> int:
        return self.episode_count * self.steps

    def validate(self):
        """划分互不相交且覆盖全部 episode"""
        ids = [e["episode_id"] for e in self.episodes]
        assigned = [i for name in SPLITS for i in self.splits.get(name, [])]
        if len(assigned) != len(set(assigned)):
            raise DataValidationError("dataset splits overlap")
        if set(assigned) != set(ids):
            raise DataValidationError("dataset splits do not cover every episode exactly once")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "tool_version": self.tool_version,
            "episode_count": self.episode_count,
            "sample_count": self.sample_count,
            "steps": self.steps,
            "dt": self.dt,
            "episodes": self.episodes,
            "splits": self.splits,
            "terrains": self.terrains,
            "heightmap": self.heightmap,
            "sensors": self.sensors,
            "normalization": self.normalization,
            "flattening": self.flattening,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetManifest":
        if data.get("schema_version") != formats.MANIFEST_SCHEMA_VERSION:
            raise FormatError(f"unsupported manifest schema {data.get('schema_version')}")
        manifest = cls(
            episodes=data["episodes"],
            splits=data["splits"],
            terrains=data["terrains"],
            heightmap=data["heightmap"],
            sensors=data["sensors"],
            steps=data["steps"],
            dt=data["dt"],
            normalization=data["normalization"],
            flattening=data["flattening"],
            schema_version=data["schema_version"],
            tool_version=data["tool_version"],
            config=data.get("config", {}),
        )
        manifest.validate()
        return manifest

    def save(self, path: Path):
        formats.write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: Path) -> "DatasetManifest":
        return cls.from_dict(formats.read_json(path))


# ---------------------------------------------------------------------------- 构建与读取

class DatasetBuilder:
    """地形集合 → episode 仿真（线程池并行）→ 容器文件 + manifest"""

    def __init__(self, config: Optional[RunConfig] = None, jobs: Optional[int] = None):
        self.config = config or RunConfig()
        self.jobs = 1 if self.config.reproducible else (jobs or self.config.jobs)
        self.metrics: Dict[PipelineStage, PipelineMetrics] = {}
        self.stats = {
            "episodes": 0,
            "samples": 0,
            "empty_scans": 0,
        }

    def _start_stage(self, stage: PipelineStage):
        self.metrics[stage] = PipelineMetrics(stage=stage, start_time=time.time())
        logger.info(f"Starting stage: {stage.value}")

    def _end_stage(self, stage: PipelineStage):
        self.metrics[stage].end_time = time.time()
        logger.info(f"Completed stage: {stage.value} in {self.metrics[stage].duration:.2f}s")

    def build(self, out_dir: Path) -> DatasetManifest:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_resolved_config(self.config, out_dir, settings.VERSION)
        cfg = self.config

        self._start_stage(PipelineStage.TERRAIN_GENERATION)
        specs = suite_specs(cfg.terrain.master_seed, cfg.terrain.count_per_kind, cfg.terrain.footprint_m)
        fields = [generate(spec) for spec in specs]
        for index, (spec, terrain) in enumerate(zip(specs, fields)):
            formats.save_heightfield(terrain, out_dir / "terrains" / f"t{index:03d}.hfld", spec.to_dict())
        self.metrics[PipelineStage.TERRAIN_GENERATION].items_processed = len(fields)
        self.metrics[PipelineStage.TERRAIN_GENERATION].success_count = len(fields)
        self._end_stage(PipelineStage.TERRAIN_GENERATION)

        jobs = []
        for terrain_index in range(len(fields)):
            for k in range(cfg.episodes.episodes_per_terrain):
                index = len(jobs)
                jobs.append((index, terrain_index, derive_seed(cfg.episodes.seed, index)))

        self._start_stage(PipelineStage.SIMULATION)
        stage = self.metrics[PipelineStage.SIMULATION]

        def run(job):
            index, terrain_index, seed = job
            episode_id = f"ep{index:05d}"
            episode = simulate_episode(fields[terrain_index], seed, cfg.episodes.steps, cfg,
                                       episode_id, terrain_index)
            episode.save(out_dir / "episodes" / f"{episode_id}.epis")
            return episode_id, terrain_index, seed, episode.empty_scans

        with ThreadPoolExecutor(max_workers=self.jobs) as executor:
            results = list(executor.map(run, jobs))
        for _, _, _, empty in results:
            stage.items_processed += 1
            stage.success_count += 1
            stage.warning_count += int(empty > 0)
            self.stats["empty_scans"] += empty
        self._end_stage(PipelineStage.SIMULATION)

        self._start_stage(PipelineStage.SPLIT)
        episodes = [{
            "episode_id": episode_id,
            "file": f"episodes/{episode_id}.epis",
            "terrain_index": terrain_index,
            "terrain_kind": specs[terrain_index].kind.value,
            "seed": seed,
        } for episode_id, terrain_index, seed, _ in results]
        splits = split_episodes([e["episode_id"] for e in episodes], cfg.episodes.seed, cfg.episodes.split)
        self._end_stage(PipelineStage.SPLIT)

        self._start_stage(PipelineStage.SERIALIZATION)
        lidar_model, camera_model = build_sensor_models(cfg.sensors)
        manifest = DatasetManifest(
            episodes=episodes,
            splits=splits,
            terrains=[spec.to_dict() for spec in specs],
            heightmap=heightmap_spec_from(cfg).to_dict(),
            sensors={
                "lidar": {"channels": lidar_model.channels, "columns": lidar_model.columns,
                          "inclination_deg": [-7.0, 52.0], "rate_hz": lidar_model.rate_hz,
                          "mount_height": cfg.sensors.lidar_mount_height,
                          "mount_roll_deg": cfg.sensors.lidar_mount_roll_deg, "max_range": lidar_model.max_range},
                "depth": {"width": camera_model.width, "height": camera_model.height,
                          "hfov_deg": camera_model.hfov_deg, "vfov_deg": camera_model.vfov_deg,
                          "mount_height": cfg.sensors.camera_mount_height,
                          "pitch_deg": cfg.sensors.camera_pitch_deg, "max_range": camera_model.max_range},
                "clip": [cfg.sensors.clip_min, cfg.sensors.clip_max],
            },
            steps=cfg.episodes.steps,
            config=cfg.to_dict(),
        )
        manifest.validate()
        manifest.save(out_dir / "manifest.json")
        self._end_stage(PipelineStage.SERIALIZATION)

        self.stats["episodes"] = manifest.episode_count
        self.stats["samples"] = manifest.sample_count
        logger.info(f"数据集构建完成: {manifest.episode_count} 个 episode, {manifest.sample_count} 个样本, "
                    f"划分 {len(splits['train'])}/{len(splits['val'])}/{len(splits['test'])}")
        return manifest

    def get_performance_report(self) -> Dict[str, Any]:
        """获取性能报告"""
        return {
            "statistics": self.stats.copy(),
            "performance_metrics": {
                stage.value: {
                    "duration": metrics.duration,
                    "success_rate": metrics.success_rate,
                    "items_processed": metrics.items_processed,
                    "warnings": metrics.warning_count,
                    "errors": len(metrics.error_details),
                }
                for stage, metrics in self.metrics.items()
            },
            "jobs": self.jobs,
        }


def build_dataset(config: RunConfig, out_dir: Path, jobs: Optional[int] = None) -> DatasetManifest:
    """构建数据集并写出性能报告"""
    builder = DatasetBuilder(config, jobs)
    manifest = builder.build(out_dir)
    formats.write_json(Path(out_dir) / "build_report.json", builder.get_performance_report())
    return manifest


class Dataset:
    """已构建数据集的只读视图，episode 按需加载并缓存"""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.manifest = DatasetManifest.load(self.root / "manifest.json")
        self._cache: Dict[str, Episode] = {}
        self._index = {e["episode_id"]: e for e in self.manifest.episodes}

    def episode_ids(self, split: str) -> List[str]:
        if split not in SPLITS:
            raise DataValidationError(f"unknown split {split}")
        return list(self.manifest.splits[split])

    def episode(self, episode_id: str, cache: bool = True) -> Episode:
        if episode_id in self._cache:
            return self._cache[episode_id]
        if episode_id not in self._index:
            raise DataValidationError(f"unknown episode {episode_id}")
        episode = Episode.load(self.root / self._index[episode_id]["file"])
        if cache:
            self._cache[episode_id] = episode
        return episode

    def terrain_kind(self, episode_id: str) -> TerrainKind:
        """从 manifest 读取地形类别，不加载 episode 文件"""
        if episode_id not in self._index:
            raise DataValidationError(f"unknown episode {episode_id}")
        return TerrainKind(self._index[episode_id]["terrain_kind"])

    def episodes(self, split: str, cache: bool = True) -> List[Episode]:
        return [self.episode(i, cache) for i in self.episode_ids(split)]

    def split_of(self, episode_id: str) -> str:
        for name in SPLITS:
            if episode_id in self.manifest.splits[name]:
                return name
        raise DataValidationError(f"episode {episode_id} is not assigned to any split")

    def heightmap_spec(self) -> HeightmapSpec:
        hm = self.manifest.heightmap
        return HeightmapSpec(hm["length"], hm["width"], hm["resolution"], hm["forward_offset"])

    def terrain(self, index: int) -> HeightField:
        return formats.load_heightfield(self.root / "terrains" / f"t{index:03d}.hfld")

    def terrain_spec(self, index: int) -> TerrainSpec:
        return TerrainSpec.from_dict(self.manifest.terrains[index])
