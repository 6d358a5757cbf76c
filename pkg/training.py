"""
heightmap-eds 两阶段训练
阶段一：逐模态去噪自编码器预训练；阶段二：EDS 截断 BPTT 监督训练
"""
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from config import RunConfig, settings, write_resolved_config
from data_pipeline import Dataset, heightmap_spec_from
from errors import ConfigError, DataValidationError, DivergenceError, SplitLeakageError
from network.eds_model import (
    MODALITY_MODES, MODALITY_SHAPES, ConvAutoencoder, EdsModel, load_pretrained_encoder, modality_ablate,
)
from network.layers import masked_mse_loss, mse_loss
from network.optim import AdamW, PlateauSchedule
from storage import formats, plots
from tools.range_image import RangeImage
from tools.sensors import DepthImage, corrupt
from tools.terrain import derive_seed

logger = logging.getLogger(__name__)

SEQUENCE_LENGTHS = (8, 32, 64)


@dataclass
class TrainingResult:
    """一次训练的产物与曲线"""
    stage: int
    checkpoint: Path
    history: List[Dict[str, Any]] = field(default_factory=list)
    best_epoch: int = 0
    initial_val: float = float("nan")
    best_val: float = float("nan")
    report: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "stage": self.stage,
            "checkpoint": str(self.checkpoint),
            "best_epoch": self.best_epoch,
            "initial_val": self.initial_val,
            "best_val": self.best_val,
            "history": self.history,
            **self.report,
        }


def check_finite(loss: float, stage: str, epoch: int, batch: Optional[int] = None):
    """NaN / Inf 损失立即中止训练"""
    if not np.isfinite(loss):
        where = f"epoch {epoch}" + (f", batch {batch}" if batch is not None else "")
        logger.error(f"{stage} 损失发散 ({where}): {loss}")
        raise DivergenceError(f"{stage} loss diverged at {where}: {loss}")


def _make_schedule(optimizer: AdamW, config: RunConfig) -> PlateauSchedule:
    s = config.schedule
    return PlateauSchedule(optimizer, factor=s.factor, patience=s.patience, threshold=s.threshold, min_lr=s.min_lr)


def _write_curves(out_dir: Path, name: str, history: List[Dict[str, Any]], columns: Sequence[str]):
    formats.write_table_csv(out_dir / f"{name}.csv", history)
    plots.write_loss_curves(out_dir / f"{name}.html", history, columns, title=name)


# ---------------------------------------------------------------------------- 阶段一

def collect_images(dataset: Dataset, split: str, modality: str, limit: Optional[int],
                   seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    从指定划分抽取单模态图像 (米) 与有效性掩码

    超过 limit 时按 seed 无放回抽样；全无效的帧（空扫描）被跳过。
    """
    if modality not in MODALITY_SHAPES:
        raise ConfigError(f"Unknown modality: {modality}")
    ids = dataset.episode_ids(split)
    steps = dataset.manifest.steps
    total = len(ids) * steps
    if total == 0:
        raise DataValidationError(f"split {split} has no episodes")
    if limit is not None and total > limit:
        chosen = np.sort(np.random.default_rng(seed).choice(total, size=limit, replace=False))
    else:
        chosen = np.arange(total)

    values, valid = [], []
    for e, episode_id in enumerate(ids):
        wanted = chosen[(chosen >= e * steps) & (chosen < (e + 1) * steps)] - e * steps
        if len(wanted) == 0:
            continue
        episode = dataset.episode(episode_id, cache=False)
        images = episode.depth if modality == "depth" else episode.lidar
        masks = episode.depth_valid if modality == "depth" else episode.lidar_valid
        keep = wanted[masks[wanted].any(axis=(1, 2))]
        values.append(images[keep].astype(np.float32))
        valid.append(masks[keep])
    if not values:
        raise DataValidationError(f"no valid {modality} images in split {split}")
    values = np.concatenate(values)
    valid = np.concatenate(valid)
    logger.info(f"{split} 划分抽取 {len(values)} 张 {modality} 图像")
    return values, valid


def corrupt_images(values: np.ndarray, valid: np.ndarray, modality: str, seeds: Iterable[int],
                   config: RunConfig) -> np.ndarray:
    """逐张加噪+遮挡后归一化 (÷3，无效为 0)"""
    cfg = config.stage1
    image_type = DepthImage if modality == "depth" else RangeImage
    out = np.zeros(values.shape, dtype=np.float32)
    for i, seed in enumerate(seeds):
        noisy = corrupt(image_type(values[i], valid[i]), seed, cfg.noise_sigma, cfg.max_occlusion,
                        config.sensors.clip_min, config.sensors.clip_max)
        out[i] = np.where(noisy.valid, noisy.values / settings.RANGE_SCALE, 0.0)
    return out


def normalize_images(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    return np.where(valid, values / settings.RANGE_SCALE, 0.0).astype(np.float32)


def autoencoder_loss(model: ConvAutoencoder, inputs: np.ndarray, targets: np.ndarray,
                     valid: np.ndarray, batch_size: int = 64) -> float:
    """整个集合上的掩码 MSE（按有效像素总数归一）"""
    total, count = 0.0, 0
    for start in range(0, len(inputs), batch_size):
        recon = model.reconstruct(inputs[start:start + batch_size])[:, 0]
        mask = valid[start:start + batch_size]
        diff = np.where(mask, recon - targets[start:start + batch_size], 0.0).astype(np.float64)
        total += float(np.sum(diff * diff))
        count += int(np.count_nonzero(mask))
    return total / max(count, 1)


def denoising_ratios(model: ConvAutoencoder, inputs: np.ndarray, targets: np.ndarray,
                     valid: np.ndarray, batch_size: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """
    逐图像 MSE(重建, 干净) / MSE(损坏输入, 干净)，以及逐像素平均重建误差

    比值 < 1 表示重建比损坏输入更接近干净图像。
    """
    ratios = np.zeros(len(inputs))
    error_sum = np.zeros(inputs.shape[1:])
    error_count = np.zeros(inputs.shape[1:])
    for start in range(0, len(inputs), batch_size):
        stop = start + batch_size
        recon = model.reconstruct(inputs[start:stop])[:, 0].astype(np.float64)
        mask = valid[start:stop]
        target = targets[start:stop].astype(np.float64)
        recon_se = np.where(mask, (recon - target) ** 2, 0.0).sum(axis=(1, 2))
        input_se = np.where(mask, (inputs[start:stop] - target) ** 2, 0.0).sum(axis=(1, 2))
        ratios[start:stop] = recon_se / np.maximum(input_se, 1e-12)
        error_sum += np.where(mask, np.abs(recon - target), 0.0).sum(axis=0)
        error_count += mask.sum(axis=0)
    error_map = np.where(error_count > 0, error_sum / np.maximum(error_count, 1), 0.0) * settings.RANGE_SCALE
    return ratios, error_map


def train_stage1(dataset: Dataset, modality: str, config: RunConfig, out_dir: Path) -> TrainingResult:
    """去噪自编码器预训练，保留验证损失最低的检查点"""
    out_dir = Path(out_dir)
    write_resolved_config(config, out_dir, settings.VERSION)
    cfg = config.stage1
    started = time.time()

    train_values, train_valid = collect_images(dataset, "train", modality, cfg.max_images, cfg.seed)
    val_limit = None if cfg.max_images is None else max(1, cfg.max_images // 4)
    val_values, val_valid = collect_images(dataset, "val", modality, val_limit, cfg.seed + 1)
    train_targets = normalize_images(train_values, train_valid)
    val_targets = normalize_images(val_values, val_valid)
    val_inputs = corrupt_images(val_values, val_valid, modality,
                                (derive_seed(cfg.seed + 1, i) for i in range(len(val_values))), config)

    model = ConvAutoencoder(modality, config.model)
    optimizer = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    schedule = _make_schedule(optimizer, config)
    rng = np.random.default_rng(cfg.seed)
    checkpoint = out_dir / f"ae_{modality}.edsw"

    def save(epoch: int, val_loss: float):
        formats.save_checkpoint(checkpoint, model.named_parameters(), config.to_dict(),
                                extra={"stage": 1, "modality": modality, "epoch": epoch, "val_loss": val_loss})

    initial = autoencoder_loss(model, val_inputs, val_targets, val_valid)
    check_finite(initial, "stage1", 0)
    result = TrainingResult(stage=1, checkpoint=checkpoint, initial_val=initial, best_val=initial)
    result.history.append({"epoch": 0, "train_loss": float("nan"), "val_loss": initial, "lr": optimizer.lr})
    save(0, initial)
    logger.info(f"阶段一 [{modality}] 初始验证损失 {initial:.6f}，训练图像 {len(train_values)}")

    count = len(train_values)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(count)
        epoch_loss, seen = 0.0, 0
        for b, start in enumerate(range(0, count, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            seeds = [derive_seed(cfg.seed, epoch * count + int(i)) for i in idx]
            inputs = corrupt_images(train_values[idx], train_valid[idx], modality, seeds, config)
            recon, cache = model.forward(inputs)
            loss, grad = masked_mse_loss(recon, train_targets[idx][:, None], train_valid[idx][:, None])
            check_finite(loss, "stage1", epoch, b)
            optimizer.zero_grad()
            model.backward(grad, cache)
            optimizer.step()
            epoch_loss += loss * len(idx)
            seen += len(idx)
            logger.debug(f"epoch {epoch} batch {b}: loss {loss:.6f}")

        val_loss = autoencoder_loss(model, val_inputs, val_targets, val_valid)
        check_finite(val_loss, "stage1", epoch)
        lr_used = optimizer.lr
        schedule.step(val_loss)
        result.history.append({"epoch": epoch, "train_loss": epoch_loss / seen, "val_loss": val_loss, "lr": lr_used})
        if val_loss < result.best_val:
            result.best_val = val_loss
            result.best_epoch = epoch
            save(epoch, val_loss)
        logger.info(f"阶段一 [{modality}] epoch {epoch}/{cfg.epochs}: "
                    f"train {epoch_loss / seen:.6f}, val {val_loss:.6f}, lr {lr_used:.2e}")

    best = load_autoencoder(checkpoint)
    ratios, error_map = denoising_ratios(best, val_inputs, val_targets, val_valid)
    formats.write_error_map_pgm(out_dir / f"ae_{modality}_error_map.pgm", error_map)
    plots.write_heatmap(out_dir / f"ae_{modality}_error_map.html", error_map,
                        title=f"{modality} mean reconstruction error (m)", x_label="column", y_label="row")
    _write_curves(out_dir, f"ae_{modality}_loss", result.history, ["train_loss", "val_loss"])

    improvement = result.initial_val / result.best_val if result.best_val > 0 else float("inf")
    result.report = {
        "modality": modality,
        "train_images": int(count),
        "val_images": int(len(val_values)),
        "improvement_ratio": improvement,
        "denoising_ratio_median": float(np.median(ratios)),
        "denoising_fraction_below_one": float(np.mean(ratios < 1.0)),
        "gates": {
            "val_loss_improved_5x": bool(improvement >= 5.0),
            "denoising_on_90pct": bool(np.mean(ratios < 1.0) >= 0.9),
        },
        "seconds": time.time() - started,
    }
    formats.write_json(out_dir / f"ae_{modality}_report.json", result.to_dict())
    logger.info(f"阶段一 [{modality}] 完成: 最佳 epoch {result.best_epoch}, 改善 {improvement:.1f}x, "
                f"去噪比中位数 {result.report['denoising_ratio_median']:.3f}")
    return result


def load_autoencoder(path: Path) -> ConvAutoencoder:
    header, tensors = formats.load_checkpoint(path)
    extra = header.get("extra", {})
    if extra.get("stage") != 1:
        raise DataValidationError(f"{path} is not a stage-1 autoencoder checkpoint")
    config = RunConfig.from_dict(header["config"])
    model = ConvAutoencoder(extra["modality"], config.model)
    formats.restore_parameters(model, tensors, header)
    return model


# ---------------------------------------------------------------------------- 阶段二

@dataclass
class SequenceSet:
    """一个划分的归一化序列张量，按 episode 对齐"""
    episode_ids: List[str]
    terrain_kinds: List[str]
    states: np.ndarray
    heightmaps: np.ndarray
    depth: Optional[np.ndarray] = None
    lidar: Optional[np.ndarray] = None

    @classmethod
    def from_dataset(cls, dataset: Dataset, split: str, modalities: Sequence[str] = ("depth", "lidar")) -> "SequenceSet":
        ids = dataset.episode_ids(split)
        if not ids:
            raise DataValidationError(f"split {split} has no episodes")
        kinds, states, heightmaps, depth, lidar = [], [], [], [], []
        for episode_id in ids:
            episode = dataset.episode(episode_id, cache=False)
            kinds.append(episode.terrain_kind.value)
            states.append(episode.states.astype(np.float32))
            heightmaps.append(episode.heightmaps.astype(np.float32))
            if "depth" in modalities:
                depth.append(episode.normalized_depth())
            if "lidar" in modalities:
                lidar.append(episode.normalized_lidar())
        return cls(
            episode_ids=list(ids),
            terrain_kinds=kinds,
            states=np.stack(states),
            heightmaps=np.stack(heightmaps),
            depth=np.stack(depth) if depth else None,
            lidar=np.stack(lidar) if lidar else None,
        )

    @property
    def steps(self) -> int:
        return self.states.shape[1]

    def windows(self, length: int) -> List[Tuple[int, int]]:
        """不重叠窗口 (episode 序号, 起点)"""
        if not 1 <= length <= self.steps:
            raise ConfigError(f"sequence length {length} outside [1, {self.steps}]")
        return [(e, start) for e in range(len(self.episode_ids))
                for start in range(0, self.steps - length + 1, length)]

    def batch(self, windows: Sequence[Tuple[int, int]], length: int):
        """返回 (depth, lidar, states, targets, episode_ids)"""
        def take(array):
            if array is None:
                return None
            return np.stack([array[e, s:s + length] for e, s in windows])
        ids = [self.episode_ids[e] for e, _ in windows]
        return take(self.depth), take(self.lidar), take(self.states), take(self.heightmaps), ids


def check_batch_split(batch_ids: Iterable[str], forbidden: Set[str]):
    """训练批次中出现验证/测试 episode 即报错"""
    leaked = sorted(set(batch_ids) & forbidden)
    if leaked:
        logger.error(f"训练批次混入非训练 episode: {leaked}")
        raise SplitLeakageError(f"held-out episodes in a training batch: {leaked}")


def feedback_mode(config: RunConfig, epoch: int) -> str:
    """预热期与 ground_truth 配置使用真值反馈，其余闭环"""
    if config.stage2.feedback == "ground_truth" or epoch <= config.stage2.warmup_epochs:
        return "ground_truth"
    return "closed_loop"


def evaluate_sequences(model: EdsModel, data: SequenceSet, length: int, batch_size: int = 16,
                       feedback_noise: float = 0.0, seed: int = 0) -> Dict[str, Any]:
    """闭环推理：返回 mse、mae 以及逐 episode 预测 (E, T', 165)"""
    windows = data.windows(length)
    rng = np.random.default_rng(seed)
    covered = data.steps // length * length
    preds = np.zeros((len(data.episode_ids), covered, data.heightmaps.shape[2]), dtype=np.float64)
    for start in range(0, len(windows), batch_size):
        chunk = windows[start:start + batch_size]
        depth, lidar, states, targets, _ = data.batch(chunk, length)
        out, _ = model.run_sequence(depth, lidar, states, feedback="closed_loop",
                                    feedback_noise=feedback_noise, rng=rng, keep_cache=False)
        for (e, s), pred in zip(chunk, out):
            preds[e, s:s + length] = pred
    targets = data.heightmaps[:, :covered].astype(np.float64)
    diff = preds - targets
    return {
        "mse": float(np.mean(diff * diff)),
        "mae": float(np.mean(np.abs(diff))),
        "predictions": preds,
        "targets": targets,
    }


def flat_predictor_mae(data: SequenceSet, nominal_base_height: float = settings.NOMINAL_BASE_HEIGHT) -> float:
    """常数平地预测（全部为 -基座名义高度）的 MAE"""
    return float(np.mean(np.abs(data.heightmaps.astype(np.float64) + nominal_base_height)))


def build_model(config: RunConfig, pretrained: Optional[Dict[str, Path]] = None) -> EdsModel:
    """按配置构建 EDS，可选加载预训练编码器"""
    model = modality_ablate(config.model, config.model.modality_mode, heightmap_spec_from(config).size)
    if config.stage2.use_pretrained and pretrained:
        for modality, path in pretrained.items():
            if model.uses(modality):
                load_pretrained_encoder(model, load_autoencoder(Path(path)))
    elif config.stage2.use_pretrained:
        logger.warning("未提供预训练检查点，编码器从随机初始化开始")
    model.train_encoders = config.stage2.fine_tune_encoders
    return model


def _param_groups(model: EdsModel, config: RunConfig, pretrained: bool) -> List[Dict[str, Any]]:
    groups = [{"params": model.core_parameters(), "lr_scale": 1.0}]
    if model.train_encoders and model.encoder_parameters():
        scale = config.stage2.encoder_lr_scale if pretrained else 1.0
        groups.append({"params": model.encoder_parameters(), "lr_scale": scale})
    return groups


def train_stage2(dataset: Dataset, config: RunConfig, out_dir: Path, mode: Optional[str] = None,
                 sequence_length: Optional[int] = None,
                 pretrained: Optional[Dict[str, Path]] = None) -> TrainingResult:
    """
    EDS 监督训练：不重叠窗口上的截断 BPTT

    前 warmup_epochs 个 epoch 反馈真值高程图，之后反馈模型自身预测；
    每个批次都核对 episode 标签，确保不含验证/测试数据。
    """
    if mode is not None:
        if mode not in MODALITY_MODES:
            raise ConfigError(f"Unknown modality mode: {mode}")
        config = dataclasses.replace(config, model=dataclasses.replace(config.model, modality_mode=mode))
    if sequence_length is not None:
        config = dataclasses.replace(config, stage2=dataclasses.replace(config.stage2, sequence_length=sequence_length))
    config.validate()
    if config.stage2.sequence_length not in SEQUENCE_LENGTHS:
        logger.warning(f"序列长度 {config.stage2.sequence_length} 不在常用取值 {SEQUENCE_LENGTHS} 中")

    out_dir = Path(out_dir)
    write_resolved_config(config, out_dir, settings.VERSION)
    cfg = config.stage2
    length = cfg.sequence_length
    started = time.time()
    dataset.manifest.validate()
    forbidden = set(dataset.episode_ids("val")) | set(dataset.episode_ids("test"))

    model = build_model(config, pretrained)
    modalities = [m for m in ("depth", "lidar") if model.uses(m)]
    train_data = SequenceSet.from_dataset(dataset, "train", modalities)
    val_data = SequenceSet.from_dataset(dataset, "val", modalities)
    check_batch_split(train_data.episode_ids, forbidden)

    using_pretrained = bool(cfg.use_pretrained and pretrained)
    optimizer = AdamW(_param_groups(model, config, using_pretrained), lr=cfg.lr, weight_decay=cfg.weight_decay)
    schedule = _make_schedule(optimizer, config)
    rng = np.random.default_rng(cfg.seed)
    checkpoint = out_dir / f"eds_{config.model.modality_mode}_seq{length}.edsw"
    extra_base = {
        "stage": 2,
        "modality_mode": config.model.modality_mode,
        "sequence_length": length,
        "pretrained": using_pretrained,
        "heightmap_size": model.heightmap_size,
    }

    def save(epoch: int, val_mae: float):
        formats.save_checkpoint(checkpoint, model.named_parameters(), config.to_dict(),
                                extra={**extra_base, "epoch": epoch, "val_mae": val_mae})

    initial = evaluate_sequences(model, val_data, length, cfg.batch_size)
    check_finite(initial["mse"], "stage2", 0)
    flat_mae = flat_predictor_mae(val_data, model.nominal_base_height)
    result = TrainingResult(stage=2, checkpoint=checkpoint, initial_val=initial["mae"], best_val=initial["mae"])
    result.history.append({"epoch": 0, "train_loss": float("nan"), "val_loss": initial["mse"],
                           "val_mae": initial["mae"], "lr": optimizer.lr, "feedback": "closed_loop"})
    save(0, initial["mae"])
    logger.info(f"阶段二 [{config.model.modality_mode}, seq {length}] 初始验证 MAE {initial['mae'] * 100:.2f} cm，"
                f"平地预测 MAE {flat_mae * 100:.2f} cm")

    windows = train_data.windows(length)
    encoder_grad_norm = None
    for epoch in range(1, cfg.epochs + 1):
        feedback = feedback_mode(config, epoch)
        order = rng.permutation(len(windows))
        epoch_loss, seen = 0.0, 0
        for b, start in enumerate(range(0, len(windows), cfg.batch_size)):
            chunk = [windows[i] for i in order[start:start + cfg.batch_size]]
            depth, lidar, states, targets, ids = train_data.batch(chunk, length)
            check_batch_split(ids, forbidden)
            preds, cache = model.run_sequence(depth, lidar, states, targets, feedback=feedback)
            loss, grad = mse_loss(preds, targets.astype(preds.dtype))
            check_finite(loss, "stage2", epoch, b)
            optimizer.zero_grad()
            model.backward_sequence(grad.astype(preds.dtype), cache)
            if encoder_grad_norm is None and model.train_encoders and model.encoder_parameters():
                encoder_grad_norm = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                                                      for p in model.encoder_parameters())))
                logger.debug(f"首个批次编码器梯度范数 {encoder_grad_norm:.3e}")
            optimizer.step()
            epoch_loss += loss * len(chunk)
            seen += len(chunk)

        val = evaluate_sequences(model, val_data, length, cfg.batch_size)
        check_finite(val["mse"], "stage2", epoch)
        lr_used = optimizer.lr
        schedule.step(val["mse"])
        result.history.append({"epoch": epoch, "train_loss": epoch_loss / seen, "val_loss": val["mse"],
                               "val_mae": val["mae"], "lr": lr_used, "feedback": feedback})
        if val["mae"] < result.best_val:
            result.best_val = val["mae"]
            result.best_epoch = epoch
            save(epoch, val["mae"])
        logger.info(f"阶段二 epoch {epoch}/{cfg.epochs} ({feedback}): train {epoch_loss / seen:.6f}, "
                    f"val MAE {val['mae'] * 100:.2f} cm, lr {lr_used:.2e}")

    _write_curves(out_dir, f"eds_{config.model.modality_mode}_seq{length}_loss", result.history,
                  ["train_loss", "val_loss"])
    result.report = {
        "modality_mode": config.model.modality_mode,
        "sequence_length": length,
        "pretrained": using_pretrained,
        "train_windows": len(windows),
        "flat_val_mae": flat_mae,
        "encoder_grad_norm_first_batch": encoder_grad_norm,
        "gates": {
            "beats_flat_by_30pct": bool(result.best_val <= 0.7 * flat_mae),
            "beats_epoch0_by_3x": bool(3.0 * result.best_val <= result.initial_val),
        },
        "seconds": time.time() - started,
    }
    formats.write_json(out_dir / f"eds_{config.model.modality_mode}_seq{length}_report.json", result.to_dict())
    logger.info(f"阶段二完成: 最佳 epoch {result.best_epoch}, 验证 MAE {result.best_val * 100:.2f} cm "
                f"(初始 {result.initial_val * 100:.2f} cm, 平地 {flat_mae * 100:.2f} cm)")
    return result


def load_eds_checkpoint(path: Path) -> Tuple[EdsModel, Dict[str, Any]]:
    """从 EDSW 检查点恢复 EDS 模型，返回 (模型, header)"""
    header, tensors = formats.load_checkpoint(path)
    extra = header.get("extra", {})
    if extra.get("stage") != 2:
        raise DataValidationError(f"{path} is not a stage-2 EDS checkpoint")
    config = RunConfig.from_dict(header["config"])
    model = modality_ablate(config.model, extra["modality_mode"], extra["heightmap_size"])
    formats.restore_parameters(model, tensors, header)
    return model, header
