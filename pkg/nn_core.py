# 文件: nn_core.py
"""
编码器所需的最小可微计算层，委托给 PyTorch 的自动求导。

约定:
  - 全部张量使用 float64
  - 时间序列张量形状 (B, C, L)
  - 所有随机性经由显式传入的 torch.Generator / numpy Generator
"""

import logging
import math
import os
from collections import OrderedDict

import torch
import torch.nn.functional as F
from torch import nn

from errors import DataError, NumericalError, ShapeError

DTYPE = torch.float64
CHECKPOINT_FORMAT = 'event-discovery-checkpoint/1'

logger = logging.getLogger("NNCore")


def _require_same_shape(op: str, a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def seeded_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def as_tensor(array) -> torch.Tensor:
    return torch.as_tensor(array, dtype=DTYPE)


# --- 原语 ---

def dense(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """x (..., in) · weightᵀ + bias，weight 形状 (out, in)。"""
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError('dense', x.shape, weight.shape)
    if bias is not None and bias.shape != weight.shape[:1]:
        raise ShapeError('dense(bias)', bias.shape, weight.shape[:1])
    return F.linear(x, weight, bias)


def conv1d_causal_dilated(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None,
                          dilation: int = 1) -> torch.Tensor:
    """因果膨胀卷积: 只在左侧补零，输出在 t 处只依赖 ≤ t 的输入。kernel 形状 (C_out, C_in, K)。"""
    if dilation < 1:
        raise DataError(f"dilation 必须 ≥ 1，当前 {dilation}")
    if x.dim() != 3 or kernel.dim() != 3 or x.shape[1] != kernel.shape[1]:
        raise ShapeError('conv1d_causal_dilated', x.shape, kernel.shape)
    pad = (kernel.shape[-1] - 1) * dilation
    return F.conv1d(F.pad(x, (pad, 0)), kernel, bias, dilation=dilation)


relu = torch.relu
sigmoid = torch.sigmoid
tanh = torch.tanh
softplus = F.softplus
log = torch.log
exp = torch.exp
log_sigmoid = F.logsigmoid


def bce_with_logits(logits: torch.Tensor, target: float) -> torch.Tensor:
    """逐元素二元交叉熵 (输入为 logit，目标为常数标签)，不做归约。"""
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, float(target)), reduction='none')


def add(a, b):
    _require_same_shape('add', a, b)
    return a + b


def sub(a, b):
    _require_same_shape('sub', a, b)
    return a - b


def mul(a, b):
    _require_same_shape('mul', a, b)
    return a * b


def reduce_mean(x, dim=None):
    return x.mean() if dim is None else x.mean(dim=dim)


def reduce_sum(x, dim=None):
    return x.sum() if dim is None else x.sum(dim=dim)


def mse(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _require_same_shape('mse', prediction, target)
    return torch.mean((prediction - target) ** 2)


def concat(tensors, dim: int = -1) -> torch.Tensor:
    return torch.cat(list(tensors), dim=dim)


def slice_along(x: torch.Tensor, start: int, stop: int, dim: int = -1) -> torch.Tensor:
    return x.narrow(dim, start, stop - start)


def gaussian_sample(mean: torch.Tensor, logvar: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """重参数化采样 mean + exp(logvar/2)·noise。"""
    _require_same_shape('gaussian_sample', mean, logvar)
    _require_same_shape('gaussian_sample', mean, noise)
    return mean + torch.exp(0.5 * logvar) * noise


def kl_standard_normal(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(μ, σ²) ‖ N(0, I))，对嵌入维求和、对批求均值。"""
    _require_same_shape('kl_standard_normal', mean, logvar)
    per_sample = 0.5 * torch.sum(mean ** 2 + torch.exp(logvar) - 1.0 - logvar, dim=-1)
    return per_sample.mean()


def backward(loss: torch.Tensor):
    if loss.numel() != 1:
        raise ShapeError('backward', loss.shape, ())
    loss.backward()


# --- 模块 ---

class CausalConv1d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, dilation: int = 1):
        super().__init__()
        self.dilation = dilation
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, dtype=DTYPE))
        self.bias = nn.Parameter(torch.empty(out_channels, dtype=DTYPE))

    def forward(self, x):
        return conv1d_causal_dilated(x, self.weight, self.bias, self.dilation)


class TemporalBlock(nn.Module):
    """两层因果膨胀卷积 + ReLU + 残差连接。"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, dilation: int):
        super().__init__()
        self.conv1 = CausalConv1d(in_channels, out_channels, kernel_size, dilation)
        self.conv2 = CausalConv1d(out_channels, out_channels, kernel_size, dilation)
        self.residual = (CausalConv1d(in_channels, out_channels, 1)
                         if in_channels != out_channels else None)

    def forward(self, x):
        h = relu(self.conv1(x))
        h = relu(self.conv2(h))
        skip = x if self.residual is None else self.residual(x)
        return relu(h + skip)


class TCNEncoder(nn.Module):
    """膨胀因果卷积堆叠 (dilation 1,2,4) → 取最后一个时间步 → 全连接到 out_dim。"""

    def __init__(self, in_channels: int, out_dim: int, hidden: int = 64, kernel_size: int = 3,
                 dilations: tuple = (1, 2, 4)):
        super().__init__()
        blocks = []
        channels = in_channels
        for dilation in dilations:
            blocks.append(TemporalBlock(channels, hidden, kernel_size, dilation))
            channels = hidden
        self.blocks = nn.Sequential(*blocks)
        self.readout = nn.Linear(hidden, out_dim, dtype=DTYPE)

    def forward(self, x):
        h = self.blocks(x)
        return self.readout(h[:, :, -1])


def uniform_fan_in_(module: nn.Module, generator: torch.Generator) -> nn.Module:
    """权重和偏置均匀初始化于 ±sqrt(1/fan_in)，按参数名顺序消耗随机数。"""
    with torch.no_grad():
        for sub in module.modules():
            weight = getattr(sub, 'weight', None)
            if not isinstance(weight, nn.Parameter):
                continue
            fan_in = weight.shape[1] * (weight.shape[2] if weight.dim() == 3 else 1)
            bound = math.sqrt(1.0 / fan_in)
            weight.uniform_(-bound, bound, generator=generator)
            bias = getattr(sub, 'bias', None)
            if isinstance(bias, nn.Parameter):
                bias.uniform_(-bound, bound, generator=generator)
    return module


# --- 参数集与优化器 ---

class ParameterSet:
    """按名称有序的可训练张量集合。"""

    def __init__(self, named: dict):
        self.tensors = OrderedDict(named)

    @classmethod
    def from_modules(cls, **modules: nn.Module) -> 'ParameterSet':
        named = OrderedDict()
        for prefix, module in modules.items():
            for name, param in module.named_parameters():
                named[f"{prefix}.{name}"] = param
        return cls(named)

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self):
        return len(self.tensors)

    def grads(self) -> dict:
        return OrderedDict((n, p.grad) for n, p in self.tensors.items())

    def zero_grad(self):
        for p in self.tensors.values():
            p.grad = None

    def snapshot(self) -> dict:
        return OrderedDict((n, p.detach().clone()) for n, p in self.tensors.items())

    def restore(self, snapshot: dict):
        with torch.no_grad():
            for n, p in self.tensors.items():
                p.copy_(snapshot[n])


def make_adam(params: ParameterSet, lr: float, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> torch.optim.Adam:
    return torch.optim.Adam(list(params.tensors.values()), lr=lr, betas=betas, eps=eps)


def adam_step(params: ParameterSet, optimizer: torch.optim.Optimizer) -> int:
    """检查梯度后执行一次 optimizer.step()；梯度含 NaN/Inf 时放弃本步，参数与优化器状态均不变。返回累计步数。"""
    for name, grad in params.grads().items():
        if grad is not None and not torch.all(torch.isfinite(grad)):
            raise NumericalError(f"参数 '{name}' 的梯度含 NaN/Inf，已放弃本步更新")
    optimizer.step()
    return max((int(s['step']) for s in optimizer.state.values() if 'step' in s), default=0)


# --- 检查点 ---

def save_checkpoint(path: str, params: ParameterSet, seed: int, step: int, extra: dict | None = None) -> str:
    """自描述二进制容器: 各张量的名称/形状/数值 + 随机种子 + 训练步数。"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    payload = {
        'format': CHECKPOINT_FORMAT,
        'seed': int(seed),
        'step': int(step),
        'shapes': {n: list(t.shape) for n, t in params},
        'tensors': OrderedDict((n, t.detach().clone().contiguous()) for n, t in params),
        'extra': extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str) -> dict:
    if not os.path.exists(path):
        raise DataError(f"检查点不存在: {path}")
    payload = torch.load(path, map_location='cpu', weights_only=True)
    if payload.get('format') != CHECKPOINT_FORMAT:
        raise DataError(f"{path} 不是受支持的检查点格式: {payload.get('format')}")
    for name, tensor in payload['tensors'].items():
        if list(tensor.shape) != list(payload['shapes'][name]):
            raise ShapeError(f'load_checkpoint({name})', tensor.shape, payload['shapes'][name])
    return payload
