"""
heightmap-eds 评估
检查点 / 融合基线在数据集划分上的 MAE 报告：总体、按地形、空间误差图、
模态对比、反馈噪声鲁棒性、平地预测基线、楼梯剖面与趋势检查
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from config import RunConfig, settings, write_resolved_config
from data_pipeline import Dataset, SPLITS, build_sensor_models
from errors import ConfigError, DataValidationError, SplitLeakageError
from storage import formats, plots
from tools.fusion_oracle import run_oracle
from tools.geometry import TERRAIN_ORDER, TerrainKind
from tools.heightmap import Heightmap, HeightmapSpec, stair_profile
from training import SequenceSet, evaluate_sequences, load_eds_checkpoint

logger = logging.getLogger(__name__)

ORACLE_MODES = {
    "fused": (True, True),
    "depth_only": (True, False),
    "lidar_only": (False, True),
}

STAIR_KINDS = (TerrainKind.STAIRS_UP.value, TerrainKind.STAIRS_DOWN.value)


@dataclass
class SourceResult:
    """一个被评估来源（检查点或融合基线）的逐帧预测"""
    label: str
    kind: str
    modality_mode: str
    sequence_length: Optional[int]
    predictions: np.ndarray
    targets: np.ndarray

    @property
    def errors(self) -> np.ndarray:
        return np.abs(self.predictions - self.targets)

    @property
    def mae(self) -> float:
        return float(np.mean(self.errors))


def check_split_isolation(dataset: Dataset, split: str):
    """评估划分不得与训练划分共享 episode"""
    if split not in SPLITS or split == "train":
        raise ConfigError(f"evaluation split must be val or test, got {split}")
    leaked = sorted(set(dataset.episode_ids(split)) & set(dataset.episode_ids("train")))
    if leaked:
        logger.error(f"评估划分与训练划分重叠: {leaked}")
        raise SplitLeakageError(f"episodes shared by train and {split}: {leaked}")
    dataset.manifest.validate()


def per_terrain_mae(result: SourceResult, kinds: Sequence[str]) -> Dict[str, float]:
    """按地形类别的 MAE；划分中缺失的类别不出现"""
    errors = result.errors.mean(axis=(1, 2))
    table = {}
    for kind in TERRAIN_ORDER:
        rows = [i for i, k in enumerate(kinds) if k == kind.value]
        if rows:
            table[kind.value] = float(np.mean(errors[rows]))
    return table


def evaluate_checkpoint(path: Path, data: SequenceSet, batch_size: int = 16) -> SourceResult:
    model, header = load_eds_checkpoint(path)
    extra = header["extra"]
    length = min(extra["sequence_length"], data.steps)
    out = evaluate_sequences(model, data, length, batch_size)
    logger.info(f"{Path(path).name}: MAE {out['mae'] * 100:.2f} cm")
    return SourceResult(
        label=Path(path).stem,
        kind="checkpoint",
        modality_mode=extra["modality_mode"],
        sequence_length=length,
        predictions=out["predictions"],
        targets=out["targets"],
    )


def evaluate_oracle(dataset: Dataset, split: str, config: RunConfig, mode: str = "fused",
                    jobs: int = 1) -> SourceResult:
    """融合基线逐 episode 运行（线程池并行，结果按 episode 顺序汇总）"""
    use_depth, use_lidar = ORACLE_MODES[mode]
    lidar_model, depth_model = build_sensor_models(config.sensors)
    spec = dataset.heightmap_spec()
    ids = dataset.episode_ids(split)

    def run(episode_id):
        episode = dataset.episode(episode_id, cache=False)
        return run_oracle(episode, spec, depth_model, lidar_model, use_depth, use_lidar), episode.heightmaps

    with ThreadPoolExecutor(max_workers=jobs) as executor:
        outputs = list(executor.map(run, ids))
    predictions = np.stack([p for p, _ in outputs])
    targets = np.stack([t for _, t in outputs]).astype(np.float64)
    result = SourceResult(f"oracle_{mode}", "oracle", mode, None, predictions, targets)
    logger.info(f"融合基线 [{mode}]: MAE {result.mae * 100:.2f} cm")
    return result


def noise_robustness(path: Path, data: SequenceSet, sigmas_cm: Sequence[float], seed: int,
                     batch_size: int = 16) -> List[Dict[str, float]]:
    """反馈通道加高斯噪声后的 MAE 曲线"""
    model, header = load_eds_checkpoint(path)
    length = min(header["extra"]["sequence_length"], data.steps)
    rows = []
    for sigma in sigmas_cm:
        out = evaluate_sequences(model, data, length, batch_size, feedback_noise=sigma / 100.0, seed=seed)
        rows.append({"noise_sigma_cm": float(sigma), "mae": out["mae"]})
        logger.info(f"反馈噪声 σ={sigma:.1f} cm: MAE {out['mae'] * 100:.2f} cm")
    return rows


def trend_gates(results: Sequence[SourceResult], primary: SourceResult, terrain_mae: Dict[str, float],
                error_map: np.ndarray, slack: float) -> Dict[str, Optional[bool]]:
    """软性趋势检查；缺少比较对象时为 None"""
    learned = [r for r in results if r.kind == primary.kind]
    by_mode = {}
    for r in learned:
        if r.sequence_length == primary.sequence_length:
            by_mode.setdefault(r.modality_mode, r.mae)
    fused_ok = None
    if {"fused", "depth_only", "lidar_only"} <= set(by_mode):
        fused_ok = bool(by_mode["fused"] <= min(by_mode["depth_only"], by_mode["lidar_only"]) * (1.0 + slack))

    by_length = {r.sequence_length: r.mae for r in learned
                 if r.modality_mode == primary.modality_mode and r.sequence_length is not None}
    seq_ok = bool(by_length[32] <= by_length[8]) if {8, 32} <= set(by_length) else None

    stairs = [terrain_mae[k] for k in STAIR_KINDS if k in terrain_mae]
    flat = terrain_mae.get(TerrainKind.FLAT.value)
    stairs_ok = bool(np.mean(stairs) >= flat) if stairs and flat is not None else None
    return {
        "fused_not_worse_than_single": fused_ok,
        "seq32_not_worse_than_seq8": seq_ok,
        "stairs_not_easier_than_flat": stairs_ok,
        "spatial_map_finite": bool(np.all(np.isfinite(error_map))),
    }


def _source_row(result: SourceResult, kinds: Sequence[str]) -> Dict[str, Any]:
    return {
        "source": result.label,
        "kind": result.kind,
        "modality_mode": result.modality_mode,
        "sequence_length": result.sequence_length,
        "mae_cm": result.mae * 100.0,
        **{f"{k}_cm": v * 100.0 for k, v in per_terrain_mae(result, kinds).items()},
    }


def _write_stair_profile(out_dir: Path, primary: SourceResult, kinds: Sequence[str], spec: HeightmapSpec):
    """第一条楼梯 episode 中间帧的纵向剖面（预测 vs 真值）"""
    stairs = [i for i, k in enumerate(kinds) if k in STAIR_KINDS]
    if not stairs:
        logger.info("评估划分中没有楼梯地形，跳过剖面输出")
        return None
    e = stairs[0]
    t = primary.predictions.shape[1] // 2
    xs, truth = stair_profile(Heightmap(spec, primary.targets[e, t]))
    _, pred = stair_profile(Heightmap(spec, primary.predictions[e, t]))
    rows = [{"x": float(x), "truth": float(a), "prediction": float(b)} for x, a, b in zip(xs, truth, pred)]
    formats.write_table_csv(out_dir / "stair_profile.csv", rows)
    plots.write_profile(out_dir / "stair_profile.html", xs, {"truth": truth, "prediction": pred},
                        title=f"{primary.label}: stair profile")
    return {"episode_index": e, "step": t}


def evaluate(dataset: Dataset, config: RunConfig, out_dir: Path, checkpoints: Sequence[Path] = (),
             oracle: bool = False, split: Optional[str] = None, jobs: int = 1) -> Dict[str, Any]:
    """
    生成评估报告（JSON + CSV + PGM/HTML 误差图）

    第一个检查点（无检查点时为融合基线）为主来源，其余检查点进入模态/序列长度对比表。
    报告只取决于检查点、划分与配置。
    """
    if not checkpoints and not oracle:
        raise ConfigError("evaluate needs at least one checkpoint or the oracle")
    split = split or config.evaluation.split
    check_split_isolation(dataset, split)
    out_dir = Path(out_dir)
    write_resolved_config(config, out_dir, settings.VERSION)
    started = time.time()
    spec = dataset.heightmap_spec()

    results: List[SourceResult] = []
    data = None
    if checkpoints:
        data = SequenceSet.from_dataset(dataset, split)
        results.extend(evaluate_checkpoint(Path(p), data) for p in checkpoints)
    if oracle:
        results.extend(evaluate_oracle(dataset, split, config, mode, jobs) for mode in ORACLE_MODES)
    kinds = [dataset.terrain_kind(i).value for i in dataset.episode_ids(split)] if data is None \
        else data.terrain_kinds

    primary = results[0]
    error_map = primary.errors.mean(axis=(0, 1)).reshape(spec.nx, spec.ny)
    if not np.all(np.isfinite(error_map)):
        raise DataValidationError("spatial error map contains non-finite values")
    formats.write_grid_csv(out_dir / "spatial_error_map.csv", error_map)
    formats.write_error_map_pgm(out_dir / "spatial_error_map.pgm", error_map)
    plots.write_heatmap(out_dir / "spatial_error_map.html", error_map, title=f"{primary.label}: per-cell MAE (m)")

    rows = [_source_row(r, kinds) for r in results]
    flat_targets = primary.targets
    flat_mae = float(np.mean(np.abs(flat_targets + settings.NOMINAL_BASE_HEIGHT)))
    rows.append({"source": "flat_predictor", "kind": "baseline", "modality_mode": None,
                 "sequence_length": None, "mae_cm": flat_mae * 100.0})
    formats.write_table_csv(out_dir / "modality_table.csv", rows)

    noise_rows = []
    if checkpoints:
        noise_rows = noise_robustness(Path(checkpoints[0]), data, config.evaluation.feedback_noise_cm,
                                      config.evaluation.seed)
        formats.write_table_csv(out_dir / "noise_robustness.csv", noise_rows)

    terrain = per_terrain_mae(primary, kinds)
    profile = _write_stair_profile(out_dir, primary, kinds, spec)
    report = {
        "split": split,
        "episodes": len(kinds),
        "primary": primary.label,
        "overall_mae_cm": primary.mae * 100.0,
        "per_terrain_mae_cm": {k: v * 100.0 for k, v in terrain.items()},
        "flat_predictor_mae_cm": flat_mae * 100.0,
        "sources": rows,
        "noise_robustness": noise_rows,
        "stair_profile": profile,
        "spatial_error_map": {"nx": spec.nx, "ny": spec.ny, "max_cm": float(error_map.max()) * 100.0},
        "single_modality_baselines": "retrained per modality (modality_ablate at construction)",
        "gates": trend_gates(results, primary, terrain, error_map, config.evaluation.fused_slack),
    }
    formats.write_json(out_dir / "report.json", report)
    logger.info(f"评估完成 ({time.time() - started:.1f}s): {primary.label} MAE {primary.mae * 100:.2f} cm")
    return report
