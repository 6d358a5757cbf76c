# 开发环境配置和工具模块
# 测试规模常量与测试数据工厂

import dataclasses
from typing import Optional

import numpy as np

from config import (
    EpisodeConfig, ModelConfig, RunConfig, Stage1Config, Stage2Config, TerrainSuiteConfig,
)
from tools.geometry import HeightField, Pose, TerrainKind


class DevConfig:
    """开发环境配置（测试规模）"""

    def __init__(self):
        self.TEST_SEED = 1234
        self.TEST_FOOTPRINT = 6.0
        self.TEST_STEPS = 4
        self.TEST_CHANNELS = [2, 3, 3, 4]
        self.TEST_LATENT = 6
        self.TEST_HIDDEN = 8

        # 有限差分梯度检查阈值
        self.GRADCHECK_LAYER_TOL = 1e-4
        self.GRADCHECK_MODEL_TOL = 1e-3


class DevTools:
    """测试数据工厂"""

    @staticmethod
    def small_model_config(mode: str = "fused", seed: int = 0) -> ModelConfig:
        dev = DevConfig()
        return ModelConfig(
            channels=list(dev.TEST_CHANNELS),
            latent_size=dev.TEST_LATENT,
            hidden_size=dev.TEST_HIDDEN,
            head_hidden=dev.TEST_HIDDEN,
            modality_mode=mode,
            seed=seed,
        )

    @staticmethod
    def tiny_run_config(steps: Optional[int] = None, epochs: int = 2) -> RunConfig:
        """7 条地形 × 1 个 episode，几个时间步，极小网络"""
        dev = DevConfig()
        steps = steps or dev.TEST_STEPS
        return RunConfig(
            terrain=TerrainSuiteConfig(master_seed=dev.TEST_SEED, count_per_kind=1, footprint_m=dev.TEST_FOOTPRINT),
            episodes=EpisodeConfig(steps=steps, episodes_per_terrain=1, seed=dev.TEST_SEED),
            model=DevTools.small_model_config(),
            stage1=Stage1Config(epochs=epochs, batch_size=4, max_images=8),
            stage2=Stage2Config(epochs=epochs, batch_size=2, sequence_length=min(2, steps), warmup_epochs=1),
        )

    @staticmethod
    def with_stage2(config: RunConfig, **changes) -> RunConfig:
        return dataclasses.replace(config, stage2=dataclasses.replace(config.stage2, **changes))

    @staticmethod
    def flat_field(size: float = 6.0, height: float = 0.0, cell: float = 0.02) -> HeightField:
        n = int(round(size / cell))
        return HeightField((-size / 2.0, -size / 2.0), cell, np.full((n, n), height), TerrainKind.FLAT)

    @staticmethod
    def ramp_field(size: float = 6.0, grade: float = 0.1, cell: float = 0.02) -> HeightField:
        """沿 x 的线性坡面"""
        n = int(round(size / cell))
        x = -size / 2.0 + (np.arange(n) + 0.5) * cell
        elevations = np.repeat((grade * x)[:, None], n, axis=1)
        return HeightField((-size / 2.0, -size / 2.0), cell, elevations, TerrainKind.SLOPE)

    @staticmethod
    def base_pose(field: HeightField, x: float = 0.0, y: float = 0.0, yaw: float = 0.0,
                  height: float = 0.75) -> Pose:
        return Pose.from_xyz_rpy(x, y, field.height_at(x, y) + height, yaw=yaw)


# 全局配置实例
dev_config = DevConfig()
