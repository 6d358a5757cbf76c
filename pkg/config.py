"""
heightmap-eds 项目配置文件
环境变量配置 (settings) + 运行配置文档 (RunConfig)
"""
import os
import json
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union, get_type_hints

from dotenv import load_dotenv

from errors import ConfigError

load_dotenv()


class Config:
    """系统配置类"""

    # 工具版本（与 __init__.__version__ 保持一致）
    VERSION: str = "1.0.0"

    # 默认输出根目录（唯一由环境变量控制的路径）
    OUTPUT_ROOT: str = os.getenv("EDS_OUTPUT_ROOT", "./runs")

    # 并行worker数量
    JOBS: int = int(os.getenv("EDS_JOBS", "1"))

    # 日志
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")

    # 名义基座高度 (m) 与量程归一化常数
    NOMINAL_BASE_HEIGHT: float = 0.75
    RANGE_SCALE: float = 3.0


# 全局配置实例
settings = Config()


@dataclass
class TerrainSuiteConfig:
    """地形集合配置"""
    master_seed: int = 42
    count_per_kind: int = 4
    footprint_m: float = 12.0


@dataclass
class SensorConfig:
    """
    传感器外参与量程

    lidar_mount_roll_deg = 0 即名义上的水平安装：视场 [-7°, 52°] 朝上，
    基座高度下最低线束约 9.4 m 处才触地，3 m 截断后平地扫描为空。
    默认 180° 倒装，视场朝下覆盖 -52° 到 +7°。
    """
    lidar_mount_height: float = 0.40
    lidar_mount_roll_deg: float = 180.0
    lidar_max_range: float = 10.0
    camera_mount_height: float = 0.35
    camera_pitch_deg: float = 30.0
    camera_hfov_deg: float = 87.0
    camera_vfov_deg: float = 58.0
    camera_max_range: float = 6.0
    clip_min: float = 0.2
    clip_max: float = 3.0
    max_gap: int = 4


@dataclass
class HeightmapConfig:
    """机器人中心高程图几何"""
    length: float = 0.98
    width: float = 0.7
    resolution: float = 0.07
    forward_offset: float = 0.2


@dataclass
class EpisodeConfig:
    """运动学轨迹与数据集规模"""
    steps: int = 64
    episodes_per_terrain: int = 5
    seed: int = 7
    nominal_base_height: float = 0.75
    height_jitter: float = 0.01
    attitude_jitter_deg: float = 2.0
    speed_range: Tuple[float, float] = (0.3, 0.7)
    yaw_rate_max: float = 0.4
    segment_seconds: Tuple[float, float] = (1.0, 2.0)
    edge_margin: float = 1.2
    split: Tuple[float, float, float] = (0.70, 0.15, 0.15)


@dataclass
class ModelConfig:
    """EDS 网络结构"""
    channels: List[int] = field(default_factory=lambda: [16, 32, 64, 128])
    latent_size: int = 256
    state_size: int = 15
    hidden_size: int = 256
    head_hidden: int = 256
    modality_mode: str = "fused"
    output_init_scale: float = 0.1
    seed: int = 0


@dataclass
class ScheduleConfig:
    """平台式学习率调度"""
    factor: float = 0.5
    patience: int = 3
    threshold: float = 1e-4
    min_lr: float = 1e-6


@dataclass
class Stage1Config:
    """自编码器预训练"""
    lr: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 40
    batch_size: int = 32
    noise_sigma: float = 0.01
    max_occlusion: float = 0.03
    max_images: Optional[int] = 4096
    seed: int = 11


@dataclass
class Stage2Config:
    """EDS 监督训练 (BPTT)"""
    lr: float = 3e-4
    weight_decay: float = 0.01
    epochs: int = 40
    batch_size: int = 16
    sequence_length: int = 32
    warmup_epochs: int = 5
    feedback: str = "scheduled"
    use_pretrained: bool = True
    fine_tune_encoders: bool = True
    encoder_lr_scale: float = 0.1
    seed: int = 13


@dataclass
class EvalConfig:
    """评估报告配置"""
    split: str = "test"
    feedback_noise_cm: List[float] = field(default_factory=lambda: [0.0, 1.0, 2.0, 3.0])
    fused_slack: float = 0.10
    seed: int = 17


@dataclass
class RunConfig:
    """一次运行的完整配置文档 (JSON)"""
    terrain: TerrainSuiteConfig = field(default_factory=TerrainSuiteConfig)
    sensors: SensorConfig = field(default_factory=SensorConfig)
    heightmap: HeightmapConfig = field(default_factory=HeightmapConfig)
    episodes: EpisodeConfig = field(default_factory=EpisodeConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    reproducible: bool = False
    jobs: int = 1

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典格式（完全解析后的配置）"""
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        """严格解析，未知键直接报错"""
        config = _build(cls, data, "config")
        config.validate()
        return config

    @classmethod
    def load(cls, path: Optional[Union[str, Path]]) -> "RunConfig":
        """从 JSON 文件加载；path 为空时返回默认配置"""
        if path is None:
            return cls()
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Invalid JSON in {path}: {e}") from e
        # 允许直接复用输出目录里的 run_config.json
        if isinstance(data, dict) and set(data) == {"tool_version", "config"}:
            data = data["config"]
        return cls.from_dict(data)

    def validate(self):
        """检查跨字段约束"""
        if self.model.modality_mode not in ("fused", "depth_only", "lidar_only"):
            raise ConfigError(f"Unknown modality_mode: {self.model.modality_mode}")
        if self.stage2.feedback not in ("scheduled", "ground_truth"):
            raise ConfigError(f"Unknown feedback mode: {self.stage2.feedback}")
        if self.stage2.sequence_length < 1 or self.stage2.sequence_length > self.episodes.steps:
            raise ConfigError("sequence_length must lie in [1, episode steps]")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if abs(sum(self.episodes.split) - 1.0) > 1e-9:
            raise ConfigError("split ratios must sum to 1")


def _build(cls, data: Any, path: str):
    """递归构建 dataclass，拒绝未知键"""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    hints = get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")

    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, value, f"{path}.{f.name}")
        elif getattr(hint, "__origin__", None) is tuple:
            kwargs[f.name] = tuple(value)
        else:
            kwargs[f.name] = value
    return cls(**kwargs)


def write_resolved_config(config: RunConfig, out_dir: Union[str, Path], version: str):
    """在输出目录写入完全解析的配置与工具版本"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    document = {"tool_version": version, "config": config.to_dict()}
    with open(out_dir / "run_config.json", "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2, sort_keys=True)
