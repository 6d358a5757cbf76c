"""
heightmap-eds 有限差分梯度检查（64 位模式）
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from network.layers import Module

logger = logging.getLogger(__name__)


def relative_error(analytic: float, numeric: float) -> float:
    """|a - n| / max(|a|, |n|, 1e-8)"""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


@dataclass
class GradCheckResult:
    max_error: float = 0.0
    worst: Optional[str] = None
    checked: int = 0
    errors: Dict[str, float] = field(default_factory=dict)

    def passed(self, tolerance: float) -> bool:
        return self.checked > 0 and self.max_error < tolerance


def numeric_gradient(loss_fn: Callable[[], float], array: np.ndarray, index: Tuple[int, ...],
                     h: float = 1e-5) -> float:
    """中心差分；原地扰动 array[index] 后恢复"""
    original = array[index]
    array[index] = original + h
    plus = loss_fn()
    array[index] = original - h
    minus = loss_fn()
    array[index] = original
    return (plus - minus) / (2.0 * h)


def grad_check(loss_fn: Callable[[], float], targets: Dict[str, Tuple[np.ndarray, np.ndarray]],
               h: float = 1e-5, samples: int = 8, seed: int = 0) -> GradCheckResult:
    """
    对比解析梯度与中心差分

    targets: 名称 → (数值数组, 解析梯度数组)；每个数组抽样 samples 个
    解析梯度不可忽略的元素（全部可忽略时随机抽样）。
    """
    rng = np.random.default_rng(seed)
    result = GradCheckResult()
    for name, (array, analytic) in targets.items():
        if array.dtype != np.float64:
            raise TypeError(f"grad_check requires float64 arrays, {name} is {array.dtype}")
        for index in _sample_indices(analytic, samples, rng):
            numeric = numeric_gradient(loss_fn, array, index, h)
            error = relative_error(float(analytic[index]), numeric)
            result.checked += 1
            key = f"{name}{list(index)}"
            result.errors[key] = error
            if error >= result.max_error:
                result.max_error = error
                result.worst = key
    logger.debug(f"梯度检查 {result.checked} 个元素，最大相对误差 {result.max_error:.3e} ({result.worst})")
    return result


def _sample_indices(analytic: np.ndarray, samples: int, rng: np.random.Generator) -> List[Tuple[int, ...]]:
    magnitude = np.abs(analytic).reshape(-1)
    scale = magnitude.max() if magnitude.size else 0.0
    candidates = np.flatnonzero(magnitude > 1e-3 * scale) if scale > 0 else np.arange(magnitude.size)
    count = min(samples, len(candidates))
    chosen = rng.choice(candidates, size=count, replace=False)
    return [np.unravel_index(int(i), analytic.shape) for i in np.sort(chosen)]


def check_module(module: Module, loss_fn: Callable[[], float], backward_fn: Callable[[], None],
                 h: float = 1e-5, samples: int = 8, seed: int = 0,
                 extra: Optional[Dict[str, Tuple[np.ndarray, np.ndarray]]] = None) -> GradCheckResult:
    """
    模块全部参数的梯度检查

    backward_fn 负责一次前向+反向并把梯度写入 Parameter.grad；
    extra 可附加输入张量的 (数值, 梯度) 对。
    """
    module.astype(np.float64)
    module.zero_grad()
    backward_fn()
    targets = {name: (param.value, param.grad.copy()) for name, param in module.named_parameters()}
    if extra:
        targets.update(extra)
    return grad_check(loss_fn, targets, h=h, samples=samples, seed=seed)
