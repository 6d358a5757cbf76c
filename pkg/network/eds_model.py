"""
heightmap-eds EDS 网络
模态 CNN 编码器 → 多模态融合（含机器人状态与上一帧高程图）→ 两层 GRU → 解码头
另含阶段一预训练用的对称卷积自编码器（无跳连）。
"""
import logging
from dataclasses import replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config import ModelConfig
from errors import ConfigError, ShapeError
from network.layers import (
    DEFAULT_DTYPE, Conv2d, ConvTranspose2d, Dense, GRUCell, LayerNorm, Module,
    conv_output_size, relu_backward, relu_forward,
)

logger = logging.getLogger(__name__)

DEPTH_SHAPE = (120, 160)
LIDAR_SHAPE = (40, 276)
MODALITY_SHAPES = {"depth": DEPTH_SHAPE, "lidar": LIDAR_SHAPE}
MODALITY_MODES = ("fused", "depth_only", "lidar_only")

# 逐帧编码时每块的帧数（限制卷积缓存占用）
ENCODE_CHUNK = 64


class ConvEncoder(Module):
    """4 级步长 2 卷积 + ReLU，展平后线性映射到潜变量"""

    def __init__(self, input_shape: Tuple[int, int], channels: Sequence[int], latent_size: int,
                 rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.channels = list(channels)
        self.latent_size = latent_size
        self.spatial_shapes = [self.input_shape]
        self.convs: List[Conv2d] = []
        in_channels = 1
        for i, out_channels in enumerate(self.channels):
            conv = self.add_module(f"conv{i}", Conv2d(in_channels, out_channels, 2, rng, dtype=dtype))
            self.convs.append(conv)
            h, w = self.spatial_shapes[-1]
            self.spatial_shapes.append((conv_output_size(h), conv_output_size(w)))
            in_channels = out_channels
        h, w = self.spatial_shapes[-1]
        self.flat_size = self.channels[-1] * h * w
        self.fc = self.add_module("fc", Dense(self.flat_size, latent_size, rng, gain=1.0, dtype=dtype))

    def forward(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[1:] != (1,) + self.input_shape:
            raise ShapeError(f"encoder expects (N, 1, {self.input_shape[0]}, {self.input_shape[1]}), got {x.shape}")
        caches = []
        for conv in self.convs:
            y, conv_cache = conv.forward(x)
            x, mask = relu_forward(y)
            caches.append((conv_cache, mask))
        feature_shape = x.shape
        latent, fc_cache = self.fc.forward(x.reshape(x.shape[0], -1))
        return latent, (caches, feature_shape, fc_cache)

    def backward(self, dlatent: np.ndarray, cache) -> np.ndarray:
        caches, feature_shape, fc_cache = cache
        d = self.fc.backward(dlatent, fc_cache).reshape(feature_shape)
        for conv, (conv_cache, mask) in zip(reversed(self.convs), reversed(caches)):
            d = conv.backward(relu_backward(d, mask), conv_cache)
        return d


class ConvDecoder(Module):
    """潜变量 → 全连接展开 → 4 级转置卷积，逐级输出尺寸与编码器镜像；最后一级线性输出"""

    def __init__(self, encoder: ConvEncoder, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.feature_channels = encoder.channels[-1]
        self.feature_shape = encoder.spatial_shapes[-1]
        self.fc = self.add_module("fc", Dense(encoder.latent_size, encoder.flat_size, rng, dtype=dtype))
        # 目标尺寸：编码器各级尺寸倒序（不含最深一级）
        self.targets = list(reversed(encoder.spatial_shapes[:-1]))
        out_channels = list(reversed(encoder.channels[:-1])) + [1]
        self.stages: List[ConvTranspose2d] = []
        in_channels = self.feature_channels
        for i, channels in enumerate(out_channels):
            last = i == len(out_channels) - 1
            stage = ConvTranspose2d(in_channels, channels, 2, rng, gain=1.0 if last else np.sqrt(2.0), dtype=dtype)
            self.stages.append(self.add_module(f"deconv{i}", stage))
            in_channels = channels

    def forward(self, latent: np.ndarray):
        h, fc_cache = self.fc.forward(latent)
        h, fc_mask = relu_forward(h)
        x = h.reshape((latent.shape[0], self.feature_channels) + tuple(self.feature_shape))
        caches = []
        for i, (stage, target) in enumerate(zip(self.stages, self.targets)):
            y, stage_cache = stage.forward(x, target)
            if i < len(self.stages) - 1:
                x, mask = relu_forward(y)
            else:
                x, mask = y, None
            caches.append((stage_cache, mask))
        return x, (fc_cache, fc_mask, caches)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        fc_cache, fc_mask, caches = cache
        d = dy
        for stage, (stage_cache, mask) in zip(reversed(self.stages), reversed(caches)):
            if mask is not None:
                d = relu_backward(d, mask)
            d = stage.backward(d, stage_cache)
        d = relu_backward(d.reshape(d.shape[0], -1), fc_mask)
        return self.fc.backward(d, fc_cache)


class ConvAutoencoder(Module):
    """
    对称卷积自编码器，用于阶段一去噪预训练

    解码器只接收 256 维潜变量，编码器中间特征不会直接传给解码器。
    """

    def __init__(self, modality: str, config: Optional[ModelConfig] = None, seed: Optional[int] = None,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        if modality not in MODALITY_SHAPES:
            raise ConfigError(f"Unknown modality: {modality}")
        config = config or ModelConfig()
        rng = np.random.default_rng(config.seed if seed is None else seed)
        self.modality = modality
        self.input_shape = MODALITY_SHAPES[modality]
        self.encoder = self.add_module("encoder", ConvEncoder(
            self.input_shape, config.channels, config.latent_size, rng, dtype))
        self.decoder = self.add_module("decoder", ConvDecoder(self.encoder, rng, dtype))

    def forward(self, x: np.ndarray):
        x = _with_channel(x).astype(self.dtype, copy=False)
        latent, enc_cache = self.encoder.forward(x)
        recon, dec_cache = self.decoder.forward(latent)
        return recon, (enc_cache, dec_cache)

    def backward(self, drecon: np.ndarray, cache):
        enc_cache, dec_cache = cache
        dlatent = self.decoder.backward(drecon, dec_cache)
        self.encoder.backward(dlatent, enc_cache)

    def reconstruct(self, x: np.ndarray, chunk: int = ENCODE_CHUNK) -> np.ndarray:
        """批量推理，不保留缓存"""
        x = _with_channel(x)
        outputs = [self.forward(x[i:i + chunk])[0] for i in range(0, len(x), chunk)]
        return np.concatenate(outputs, axis=0)


def ae_forward(autoencoder: ConvAutoencoder, image: np.ndarray) -> np.ndarray:
    """单张或一批归一化图像的重建，形状与输入相同"""
    single = image.ndim == 2
    recon = autoencoder.reconstruct(image[None] if single else image)
    return recon[0, 0] if single else recon.reshape(image.shape)


def _with_channel(x: np.ndarray) -> np.ndarray:
    """(N, H, W) → (N, 1, H, W)"""
    x = np.asarray(x)
    if x.ndim == 3:
        return x[:, None]
    return x


class EdsModel(Module):
    """
    编码器-解码器-序列 (EDS) 模型

    融合输入 = [深度潜变量 256, LiDAR 潜变量 256, 机器人状态 15, 上一帧高程图 165]；
    高程图在网络内部加上名义基座高度 0.75 m（偏移空间），输出时再减去。
    缺失的模态用可学习的常量潜变量替代，融合层宽度不变。
    """

    def __init__(self, config: Optional[ModelConfig] = None, heightmap_size: int = 165,
                 nominal_base_height: float = 0.75, dtype=DEFAULT_DTYPE):
        super().__init__()
        config = config or ModelConfig()
        if config.modality_mode not in MODALITY_MODES:
            raise ConfigError(f"Unknown modality_mode: {config.modality_mode}")
        self.config = config
        self.heightmap_size = heightmap_size
        self.nominal_base_height = nominal_base_height
        self.latent_size = config.latent_size
        self.state_size = config.state_size
        self.hidden_size = config.hidden_size
        self.train_encoders = True
        rng = np.random.default_rng(config.seed)

        self.encoders = {}
        for modality in ("depth", "lidar"):
            if self.uses(modality):
                self.encoders[modality] = self.add_module(f"{modality}_encoder", ConvEncoder(
                    MODALITY_SHAPES[modality], config.channels, config.latent_size, rng, dtype))
            else:
                self.add_parameter(f"{modality}_constant",
                                   rng.normal(0.0, 0.01, config.latent_size).astype(dtype))

        fusion_in = 2 * config.latent_size + config.state_size + heightmap_size
        self.fusion_dense = self.add_module("fusion_dense", Dense(fusion_in, config.hidden_size, rng, dtype=dtype))
        self.fusion_norm = self.add_module("fusion_norm", LayerNorm(config.hidden_size, dtype=dtype))
        self.gru1 = self.add_module("gru1", GRUCell(config.hidden_size, config.hidden_size, rng, dtype))
        self.gru2 = self.add_module("gru2", GRUCell(config.hidden_size, config.hidden_size, rng, dtype))
        self.head1 = self.add_module("head1", Dense(config.hidden_size, config.head_hidden, rng, dtype=dtype))
        self.head2 = self.add_module("head2", Dense(config.head_hidden, heightmap_size, rng, gain=1.0, dtype=dtype))
        self.head2.weight.value *= config.output_init_scale

        logger.info(f"EDS 模型已构建: mode={config.modality_mode}, 参数量 {self.num_parameters():,}")

    @property
    def fusion_width(self) -> int:
        return 2 * self.latent_size + self.state_size + self.heightmap_size

    def uses(self, modality: str) -> bool:
        mode = self.config.modality_mode
        return mode == "fused" or mode == f"{modality}_only"

    def encoder_parameters(self):
        return [p for m in self.encoders.values() for p in m.parameters()]

    def core_parameters(self):
        encoder_ids = {id(p) for p in self.encoder_parameters()}
        return [p for p in self.parameters() if id(p) not in encoder_ids]

    def initial_hidden(self, batch: int) -> Tuple[np.ndarray, np.ndarray]:
        """序列起点的零隐状态"""
        zeros = np.zeros((batch, self.hidden_size), dtype=self.dtype)
        return zeros, zeros.copy()

    # ------------------------------------------------------------------ 编码

    def encode(self, modality: str, images: np.ndarray) -> np.ndarray:
        """归一化图像 → 256 维潜变量；缺失模态返回常量潜变量"""
        images = _with_channel(images[None] if np.ndim(images) == 2 else images)
        latents, _ = self._encode_frames(modality, images, keep_cache=False)
        return latents

    def _constant_latent(self, modality: str, count: int) -> np.ndarray:
        constant = self._parameters[f"{modality}_constant"].value
        return np.broadcast_to(constant, (count, self.latent_size)).copy()

    def _encode_frames(self, modality: str, frames: np.ndarray, keep_cache: bool = True):
        count = frames.shape[0]
        if modality not in self.encoders:
            return self._constant_latent(modality, count), None
        encoder = self.encoders[modality]
        frames = frames.astype(self.dtype, copy=False)
        latents = []
        caches = []
        for start in range(0, count, ENCODE_CHUNK):
            latent, cache = encoder.forward(frames[start:start + ENCODE_CHUNK])
            latents.append(latent)
            if keep_cache and self.train_encoders:
                caches.append(cache)
        return np.concatenate(latents, axis=0), caches

    def _encode_backward(self, modality: str, dlatents: np.ndarray, caches):
        if modality not in self.encoders:
            self._parameters[f"{modality}_constant"].grad += dlatents.sum(axis=0)
            return
        if not self.train_encoders:
            return
        encoder = self.encoders[modality]
        for i, cache in enumerate(caches):
            encoder.backward(dlatents[i * ENCODE_CHUNK:(i + 1) * ENCODE_CHUNK], cache)

    # ------------------------------------------------------------------ 单步

    def _step(self, depth_latent, lidar_latent, state, prev_offset, hidden):
        h1, h2 = hidden
        fusion_in = np.concatenate([depth_latent, lidar_latent, state, prev_offset], axis=1)
        f, fusion_cache = self.fusion_dense.forward(fusion_in)
        g, norm_cache = self.fusion_norm.forward(f)
        a, fusion_mask = relu_forward(g)
        h1, gru1_cache = self.gru1.forward(a, h1)
        h2, gru2_cache = self.gru2.forward(h1, h2)
        q, head1_cache = self.head1.forward(h2)
        qa, head_mask = relu_forward(q)
        out, head2_cache = self.head2.forward(qa)
        cache = (fusion_cache, norm_cache, fusion_mask, gru1_cache, gru2_cache, head1_cache, head_mask, head2_cache)
        return out, (h1, h2), cache

    def _step_backward(self, dout, dh1_next, dh2_next, cache):
        fusion_cache, norm_cache, fusion_mask, gru1_cache, gru2_cache, head1_cache, head_mask, head2_cache = cache
        dqa = self.head2.backward(dout, head2_cache)
        dh2 = self.head1.backward(relu_backward(dqa, head_mask), head1_cache) + dh2_next
        dh1_from_top, dh2_prev = self.gru2.backward(dh2, gru2_cache)
        da, dh1_prev = self.gru1.backward(dh1_from_top + dh1_next, gru1_cache)
        df = self.fusion_norm.backward(relu_backward(da, fusion_mask), norm_cache)
        dfusion_in = self.fusion_dense.backward(df, fusion_cache)
        return dfusion_in, dh1_prev, dh2_prev

    def eds_step(self, depth: Optional[np.ndarray], lidar: Optional[np.ndarray], state: np.ndarray,
                 prev_heightmap: Optional[np.ndarray], hidden=None):
        """
        单样本单步推理

        depth / lidar 为归一化图像（缺失模态可传 None），prev_heightmap 为上一帧输出（米），
        t=0 传 None 即平地先验。返回 (高程图 [米], 新隐状态)。
        """
        dtype = self.dtype
        hidden = hidden if hidden is not None else self.initial_hidden(1)
        depth_latent = self._latent_for("depth", depth)
        lidar_latent = self._latent_for("lidar", lidar)
        state = np.asarray(state, dtype=dtype).reshape(1, self.state_size)
        if prev_heightmap is None:
            prev_offset = np.zeros((1, self.heightmap_size), dtype=dtype)
        else:
            prev_offset = (np.asarray(prev_heightmap, dtype=dtype) + self.nominal_base_height).reshape(1, -1)
        out, hidden, _ = self._step(depth_latent, lidar_latent, state, prev_offset, hidden)
        return out[0] - self.nominal_base_height, hidden

    def _latent_for(self, modality: str, image: Optional[np.ndarray]) -> np.ndarray:
        if modality not in self.encoders:
            return self._constant_latent(modality, 1)
        if image is None:
            raise ShapeError(f"{modality} input is required in {self.config.modality_mode} mode")
        return self.encode(modality, np.asarray(image))

    # ------------------------------------------------------------------ 序列

    def run_sequence(self, depth: Optional[np.ndarray], lidar: Optional[np.ndarray], states: np.ndarray,
                     targets: Optional[np.ndarray] = None, feedback: str = "closed_loop",
                     feedback_noise: float = 0.0, rng: Optional[np.random.Generator] = None,
                     keep_cache: bool = True):
        """
        批量展开一段序列

        depth (N, T, 120, 160)、lidar (N, T, 40, 276) 为归一化图像，states (N, T, 15)，
        targets (N, T, 165) 为真值高程图（米）。feedback="ground_truth" 时上一帧输入取真值，
        否则取模型自身输出；feedback_noise (米) 为叠加在反馈通道上的高斯噪声。
        返回 (predictions [米], cache)。
        """
        if feedback not in ("closed_loop", "ground_truth"):
            raise ConfigError(f"Unknown feedback mode: {feedback}")
        if feedback == "ground_truth" and targets is None:
            raise ShapeError("ground_truth feedback needs targets")
        dtype = self.dtype
        states = np.asarray(states, dtype=dtype)
        n, steps = states.shape[:2]
        if states.shape[2] != self.state_size:
            raise ShapeError(f"robot state must have {self.state_size} values, got {states.shape[2]}")
        if feedback_noise > 0 and rng is None:
            rng = np.random.default_rng(0)

        latents = {}
        encode_caches = {}
        for modality, frames in (("depth", depth), ("lidar", lidar)):
            if modality in self.encoders:
                if frames is None:
                    raise ShapeError(f"{modality} frames are required in {self.config.modality_mode} mode")
                flat = _with_channel(np.asarray(frames).reshape((n * steps,) + MODALITY_SHAPES[modality]))
                encoded, cache = self._encode_frames(modality, flat, keep_cache)
            else:
                encoded, cache = self._constant_latent(modality, n * steps), None
            latents[modality] = encoded.reshape(n, steps, self.latent_size)
            encode_caches[modality] = cache

        hidden = self.initial_hidden(n)
        outputs = np.zeros((n, steps, self.heightmap_size), dtype=dtype)
        step_caches = []
        prev_offset = np.zeros((n, self.heightmap_size), dtype=dtype)
        for t in range(steps):
            if t > 0:
                if feedback == "ground_truth":
                    prev_offset = (targets[:, t - 1] + self.nominal_base_height).astype(dtype)
                else:
                    prev_offset = outputs[:, t - 1]
                if feedback_noise > 0:
                    prev_offset = prev_offset + rng.normal(0.0, feedback_noise, prev_offset.shape).astype(dtype)
            out, hidden, cache = self._step(latents["depth"][:, t], latents["lidar"][:, t], states[:, t],
                                            prev_offset, hidden)
            outputs[:, t] = out
            if keep_cache:
                step_caches.append(cache)

        cache = (feedback, encode_caches, step_caches, n, steps) if keep_cache else None
        return outputs - self.nominal_base_height, cache

    def backward_sequence(self, dpred: np.ndarray, cache):
        """完整 BPTT，闭环模式下梯度也沿反馈通道回传到上一帧输出"""
        feedback, encode_caches, step_caches, n, steps = cache
        latent = self.latent_size
        dlatents = {
            "depth": np.zeros((n, steps, latent), dtype=dpred.dtype),
            "lidar": np.zeros((n, steps, latent), dtype=dpred.dtype),
        }
        dh1 = np.zeros((n, self.hidden_size), dtype=dpred.dtype)
        dh2 = np.zeros_like(dh1)
        dfeedback = np.zeros((n, self.heightmap_size), dtype=dpred.dtype)
        prev_start = 2 * latent + self.state_size
        for t in reversed(range(steps)):
            dout = dpred[:, t] + dfeedback
            dfusion_in, dh1, dh2 = self._step_backward(dout, dh1, dh2, step_caches[t])
            dlatents["depth"][:, t] = dfusion_in[:, :latent]
            dlatents["lidar"][:, t] = dfusion_in[:, latent:2 * latent]
            if feedback == "closed_loop":
                dfeedback = dfusion_in[:, prev_start:]
        for modality in ("depth", "lidar"):
            self._encode_backward(modality, dlatents[modality].reshape(n * steps, latent), encode_caches[modality])


def modality_ablate(config: ModelConfig, mode: str, heightmap_size: int = 165) -> EdsModel:
    """按指定模态构建模型；缺失模态的潜变量为可学习常量"""
    if mode not in MODALITY_MODES:
        raise ConfigError(f"Unknown modality mode: {mode}")
    return EdsModel(replace(config, modality_mode=mode), heightmap_size)


def load_pretrained_encoder(model: EdsModel, autoencoder: ConvAutoencoder):
    """把预训练自编码器的编码器权重拷入 EDS 模型"""
    modality = autoencoder.modality
    if modality not in model.encoders:
        logger.warning(f"模型不使用 {modality} 模态，跳过预训练权重加载")
        return
    model.encoders[modality].load_state_dict(autoencoder.encoder.state_dict())
    logger.info(f"已加载 {modality} 预训练编码器")
