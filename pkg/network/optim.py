"""
heightmap-eds 优化器与学习率调度
AdamW（解耦权重衰减）、Adam（耦合 L2）、平台式学习率调度
"""
import logging
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from network.layers import Parameter

logger = logging.getLogger(__name__)

ParamGroups = Union[Iterable[Parameter], Sequence[Dict]]


def _as_groups(params: ParamGroups) -> List[Dict]:
    """参数列表或 [{"params": [...], "lr_scale": s}, ...]"""
    params = list(params)
    if params and isinstance(params[0], dict):
        return [{"params": list(g["params"]), "lr_scale": float(g.get("lr_scale", 1.0))} for g in params]
    return [{"params": params, "lr_scale": 1.0}]


class Adam:
    """Adam；weight_decay 以 L2 形式加到梯度上"""

    decoupled = False

    def __init__(self, params: ParamGroups, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.param_groups = _as_groups(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay

    def step(self):
        for group in self.param_groups:
            lr = self.lr * group["lr_scale"]
            for param in group["params"]:
                self._update(param, lr)

    def _update(self, param: Parameter, lr: float):
        grad = param.grad
        if self.weight_decay:
            if self.decoupled:
                param.value -= lr * self.weight_decay * param.value
            else:
                grad = grad + self.weight_decay * param.value

        param.step += 1
        param.m = self.beta1 * param.m + (1.0 - self.beta1) * grad
        param.v = self.beta2 * param.v + (1.0 - self.beta2) * grad * grad
        m_hat = param.m / (1.0 - self.beta1 ** param.step)
        v_hat = param.v / (1.0 - self.beta2 ** param.step)
        update = lr * m_hat / (np.sqrt(v_hat) + self.eps)
        param.value -= update.astype(param.value.dtype)

    def zero_grad(self):
        for group in self.param_groups:
            for param in group["params"]:
                param.grad[...] = 0.0


class AdamW(Adam):
    """AdamW：先做 p ← p - lr·wd·p，再做带偏差校正的 Adam 更新"""

    decoupled = True

    def __init__(self, params: ParamGroups, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        super().__init__(params, lr, betas, eps, weight_decay)


class PlateauSchedule:
    """
    验证损失连续 patience 个 epoch 没有相对改善 threshold 时，lr 乘以 factor

    第一次调用只记录基线；降低学习率后计数清零；lr 不低于 min_lr。
    """

    def __init__(self, optimizer: Optional[Adam] = None, lr: Optional[float] = None, factor: float = 0.5,
                 patience: int = 3, threshold: float = 1e-4, min_lr: float = 1e-6):
        if optimizer is None and lr is None:
            raise ValueError("PlateauSchedule needs an optimizer or an initial lr")
        self.optimizer = optimizer
        self.lr = optimizer.lr if lr is None else lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.best: Optional[float] = None
        self.bad_epochs = 0
        self.reductions = 0

    def step(self, val_loss: float) -> float:
        if self.best is None or val_loss < self.best * (1.0 - self.threshold):
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                new_lr = max(self.lr * self.factor, self.min_lr)
                if new_lr < self.lr:
                    self.reductions += 1
                    logger.info(f"验证损失停滞 {self.patience} 个 epoch，学习率 {self.lr:.2e} -> {new_lr:.2e}")
                self.lr = new_lr
                self.bad_epochs = 0
        if self.optimizer is not None:
            self.optimizer.lr = self.lr
        return self.lr

    def state_dict(self) -> Dict:
        return {
            "lr": self.lr,
            "best": self.best,
            "bad_epochs": self.bad_epochs,
            "reductions": self.reductions,
        }
