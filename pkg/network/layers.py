"""
heightmap-eds 可微分层
numpy 实现的前向/反向：步长卷积、转置卷积、全连接、层归一化、ReLU、GRU、MSE

约定：forward(x) 返回 (y, cache)；backward(dy, cache) 返回 dx 并把参数梯度累加到 Parameter.grad。
张量第 0 维为 batch。卷积为互相关（不翻转卷积核）。
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from errors import EmptyInputError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
RELU_GAIN = float(np.sqrt(2.0))


@dataclass(eq=False)
class Parameter:
    """参数值、梯度与 Adam 状态（一阶/二阶矩、步数）"""
    name: str
    value: np.ndarray
    grad: np.ndarray = None
    m: np.ndarray = None
    v: np.ndarray = None
    step: int = 0

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def astype(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.m = self.m.astype(dtype)
        self.v = self.v.astype(dtype)


def kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int,
                    gain: float = RELU_GAIN, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """U(-b, b)，b = gain·sqrt(3 / fan_in)"""
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """参数与子模块的有序容器；named_parameters 的顺序只取决于构造顺序"""

    def __init__(self):
        self._parameters: "OrderedDict[str, Parameter]" = OrderedDict()
        self._modules: "OrderedDict[str, Module]" = OrderedDict()

    def add_parameter(self, name: str, value: np.ndarray) -> Parameter:
        param = Parameter(name, value)
        self._parameters[name] = param
        return param

    def add_module(self, name: str, module: "Module") -> "Module":
        self._modules[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, param in self._parameters.items():
            yield prefix + name, param
        for name, module in self._modules.items():
            yield from module.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Parameter]:
        return [param for _, param in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(param.value.size for param in self.parameters()))

    def zero_grad(self):
        for param in self.parameters():
            param.grad[...] = 0.0

    def astype(self, dtype) -> "Module":
        for param in self.parameters():
            param.astype(dtype)
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].value.dtype if params else DEFAULT_DTYPE

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((name, param.value.copy()) for name, param in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True):
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            raise ShapeError(f"state dict mismatch: missing={missing} unexpected={unexpected}")
        for name, value in state.items():
            if name not in own:
                continue
            if own[name].shape != tuple(value.shape):
                raise ShapeError(f"{name}: expected {own[name].shape}, got {tuple(value.shape)}")
            own[name].value = np.asarray(value, dtype=own[name].value.dtype).copy()


def conv_output_size(size: int, stride: int = 2, kernel: int = 3, padding: int = 1) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class Conv2d(Module):
    """3×3 卷积，padding 1，权重 (C_out, C_in, 3, 3)"""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 2,
                 rng: Optional[np.random.Generator] = None, gain: float = RELU_GAIN, dtype=DEFAULT_DTYPE):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.weight = self.add_parameter(
            "weight", kaiming_uniform(rng, (out_channels, in_channels, 3, 3), in_channels * 9, gain, dtype))
        self.bias = self.add_parameter("bias", np.zeros(out_channels, dtype=dtype))

    def output_shape(self, height: int, width: int) -> Tuple[int, int]:
        return conv_output_size(height, self.stride), conv_output_size(width, self.stride)

    def _window(self, ki: int, kj: int, ho: int, wo: int) -> Tuple[slice, slice]:
        s = self.stride
        return slice(ki, ki + s * (ho - 1) + 1, s), slice(kj, kj + s * (wo - 1) + 1, s)

    def forward(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"Conv2d expects (N, {self.in_channels}, H, W), got {x.shape}")
        n, _, h, w = x.shape
        ho, wo = self.output_shape(h, w)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        out = np.zeros((n, ho, wo, self.out_channels), dtype=x.dtype)
        for ki in range(3):
            for kj in range(3):
                rows, cols = self._window(ki, kj, ho, wo)
                out += np.tensordot(xp[:, :, rows, cols], self.weight.value[:, :, ki, kj], axes=([1], [1]))
        y = out.transpose(0, 3, 1, 2) + self.bias.value[None, :, None, None]
        return y, (xp, x.shape)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        xp, x_shape = cache
        _, _, ho, wo = dy.shape
        self.bias.grad += dy.sum(axis=(0, 2, 3))
        dxp = np.zeros_like(xp)
        for ki in range(3):
            for kj in range(3):
                rows, cols = self._window(ki, kj, ho, wo)
                self.weight.grad[:, :, ki, kj] += np.tensordot(dy, xp[:, :, rows, cols], axes=([0, 2, 3], [0, 2, 3]))
                dxp[:, :, rows, cols] += np.tensordot(
                    dy, self.weight.value[:, :, ki, kj], axes=([1], [0])).transpose(0, 3, 1, 2)
        return dxp[:, :, 1:x_shape[2] + 1, 1:x_shape[3] + 1]


class ConvTranspose2d(Module):
    """
    步长卷积的伴随算子，权重 (C_in, C_out, 3, 3)

    步长 2 的逆映射不唯一，输出尺寸由调用方显式给出，
    须满足 s·(h-1)+1 ≤ H ≤ s·h。
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int = 2,
                 rng: Optional[np.random.Generator] = None, gain: float = RELU_GAIN, dtype=DEFAULT_DTYPE):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.weight = self.add_parameter(
            "weight", kaiming_uniform(rng, (in_channels, out_channels, 3, 3), in_channels * 9, gain, dtype))
        self.bias = self.add_parameter("bias", np.zeros(out_channels, dtype=dtype))

    def _window(self, ki: int, kj: int, h: int, w: int) -> Tuple[slice, slice]:
        s = self.stride
        return slice(ki, ki + s * (h - 1) + 1, s), slice(kj, kj + s * (w - 1) + 1, s)

    def forward(self, x: np.ndarray, output_size: Tuple[int, int]):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"ConvTranspose2d expects (N, {self.in_channels}, h, w), got {x.shape}")
        n, _, h, w = x.shape
        height, width = output_size
        s = self.stride
        if not (s * (h - 1) + 1 <= height <= s * h and s * (w - 1) + 1 <= width <= s * w):
            raise ShapeError(f"output size {output_size} is not reachable from {(h, w)} with stride {s}")
        yp = np.zeros((n, self.out_channels, height + 2, width + 2), dtype=x.dtype)
        for ki in range(3):
            for kj in range(3):
                rows, cols = self._window(ki, kj, h, w)
                yp[:, :, rows, cols] += np.tensordot(
                    x, self.weight.value[:, :, ki, kj], axes=([1], [0])).transpose(0, 3, 1, 2)
        y = yp[:, :, 1:height + 1, 1:width + 1] + self.bias.value[None, :, None, None]
        return y, x

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x = cache
        _, _, h, w = x.shape
        self.bias.grad += dy.sum(axis=(0, 2, 3))
        dyp = np.pad(dy, ((0, 0), (0, 0), (1, 1), (1, 1)))
        dx = np.zeros((x.shape[0], h, w, self.in_channels), dtype=dy.dtype)
        for ki in range(3):
            for kj in range(3):
                rows, cols = self._window(ki, kj, h, w)
                patch = dyp[:, :, rows, cols]
                self.weight.grad[:, :, ki, kj] += np.tensordot(x, patch, axes=([0, 2, 3], [0, 2, 3]))
                dx += np.tensordot(patch, self.weight.value[:, :, ki, kj], axes=([1], [1]))
        return dx.transpose(0, 3, 1, 2)


class Dense(Module):
    """y = x·Wᵀ + b，W 形状 (out, in)"""

    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None,
                 gain: float = RELU_GAIN, dtype=DEFAULT_DTYPE):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = self.add_parameter(
            "weight", kaiming_uniform(rng, (out_features, in_features), in_features, gain, dtype))
        self.bias = self.add_parameter("bias", np.zeros(out_features, dtype=dtype))

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Dense expects {self.in_features} features, got {x.shape[-1]}")
        return x @ self.weight.value.T + self.bias.value, x

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x = cache
        self.weight.grad += dy.T @ x
        self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.value


class LayerNorm(Module):
    """特征维归一化，ε = 1e-5，可学习 scale/shift"""

    def __init__(self, features: int, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.features = features
        self.eps = eps
        self.gamma = self.add_parameter("gamma", np.ones(features, dtype=dtype))
        self.beta = self.add_parameter("beta", np.zeros(features, dtype=dtype))

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.features:
            raise ShapeError(f"LayerNorm expects {self.features} features, got {x.shape[-1]}")
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean) * inv_std
        return self.gamma.value * x_hat + self.beta.value, (x_hat, inv_std)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x_hat, inv_std = cache
        self.gamma.grad += (dy * x_hat).sum(axis=0)
        self.beta.grad += dy.sum(axis=0)
        dx_hat = dy * self.gamma.value
        d = self.features
        return inv_std / d * (d * dx_hat - dx_hat.sum(axis=-1, keepdims=True)
                              - x_hat * (dx_hat * x_hat).sum(axis=-1, keepdims=True))


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


class GRUCell(Module):
    """
    标准 GRU，门顺序 [z, r, n]

    z = σ(W_z x + U_z h + b_z)；r = σ(W_r x + U_r h + b_r)
    n = tanh(W_n x + r ⊙ (U_n h) + b_n)；h' = (1 - z) ⊙ n + z ⊙ h
    """

    def __init__(self, input_size: int, hidden_size: int, rng: Optional[np.random.Generator] = None,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.W = self.add_parameter("W", kaiming_uniform(rng, (3 * hidden_size, input_size), input_size, 1.0, dtype))
        self.U = self.add_parameter("U", kaiming_uniform(rng, (3 * hidden_size, hidden_size), hidden_size, 1.0, dtype))
        self.b = self.add_parameter("b", np.zeros(3 * hidden_size, dtype=dtype))

    def forward(self, x: np.ndarray, h: np.ndarray):
        if x.shape[-1] != self.input_size or h.shape[-1] != self.hidden_size:
            raise ShapeError(f"GRUCell expects ({self.input_size}, {self.hidden_size}), got {x.shape}, {h.shape}")
        hs = self.hidden_size
        gx = x @ self.W.value.T + self.b.value
        gh = h @ self.U.value.T
        z = expit(gx[:, :hs] + gh[:, :hs])
        r = expit(gx[:, hs:2 * hs] + gh[:, hs:2 * hs])
        gh_n = gh[:, 2 * hs:]
        n = np.tanh(gx[:, 2 * hs:] + r * gh_n)
        h_new = (1.0 - z) * n + z * h
        return h_new, (x, h, z, r, n, gh_n)

    def backward(self, dh_new: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray]:
        """返回 (dx, dh)"""
        x, h, z, r, n, gh_n = cache
        dn = dh_new * (1.0 - z)
        dz = dh_new * (h - n)
        dh = dh_new * z

        da_n = dn * (1.0 - n * n)
        dr = da_n * gh_n
        da_z = dz * z * (1.0 - z)
        da_r = dr * r * (1.0 - r)

        dgx = np.concatenate([da_z, da_r, da_n], axis=1)
        dgh = np.concatenate([da_z, da_r, da_n * r], axis=1)
        self.W.grad += dgx.T @ x
        self.b.grad += dgx.sum(axis=0)
        self.U.grad += dgh.T @ h
        return dgx @ self.W.value, dh + dgh @ self.U.value


def mse_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """均方误差与梯度 2(pred - target)/N"""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def masked_mse_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> Tuple[float, np.ndarray]:
    """只在 mask 为真的元素上求均值"""
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ShapeError(f"masked_mse_loss shape mismatch: {pred.shape}, {target.shape}, {mask.shape}")
    count = int(np.count_nonzero(mask))
    if count == 0:
        raise EmptyInputError("masked_mse_loss: every element is masked out")
    diff = np.where(mask, pred - target, 0.0).astype(pred.dtype)
    return float(np.sum(diff * diff) / count), (2.0 / count) * diff
