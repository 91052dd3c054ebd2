# 文件: encoders.py
"""
六种自监督编码器 f: R^{d×w} → R^e 共享同一个 TCN 主干，区别只在训练目标和辅助头:

  AE         窗口重建解码器
  Drive2Vec  重建解码器 + 下一窗口预测解码器
  VAME       变分编码 (均值/对数方差) + 重建 + 未来预测
  VAMEstar   VAME + 过去预测
  TLoss      无辅助头 (三元组损失)
  TNC        邻域判别器

冻结后只保留 f，辅助头被丢弃。
"""

import logging
import os

import numpy as np
import torch
from torch import nn

import nn_core
from config import EncoderVariant, TrainingConfig, settings
from errors import ConfigError, DataError, ShapeError
from helpers import read_json, write_json
from timeseries import MultivariateTimeSeries, SlidingWindowSpec, TimeSeriesRepresentation, window_stack

HEADS_BY_VARIANT = {
    EncoderVariant.AE: ('reconstruct',),
    EncoderVariant.DRIVE2VEC: ('reconstruct', 'future'),
    EncoderVariant.VAME: ('reconstruct', 'future'),
    EncoderVariant.VAME_STAR: ('reconstruct', 'future', 'past'),
    EncoderVariant.TLOSS: (),
    EncoderVariant.TNC: ('discriminator',),
}


class WindowDecoder(nn.Module):
    """嵌入 → d×w 窗口。"""

    def __init__(self, e: int, d: int, w: int, hidden: int):
        super().__init__()
        self.d, self.w = d, w
        self.net = nn.Sequential(nn.Linear(e, hidden, dtype=nn_core.DTYPE), nn.ReLU(),
                                 nn.Linear(hidden, d * w, dtype=nn_core.DTYPE))

    def forward(self, z):
        return self.net(z).view(z.shape[0], self.d, self.w)


class NeighborhoodDiscriminator(nn.Module):
    """D(z1, z2) → 邻居概率的 logit。"""

    def __init__(self, e: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(2 * e, 4 * e, dtype=nn_core.DTYPE), nn.ReLU(),
                                 nn.Linear(4 * e, 1, dtype=nn_core.DTYPE))

    def forward(self, z1, z2):
        return self.net(torch.cat([z1, z2], dim=-1)).squeeze(-1)


class EncoderModel:
    def __init__(self, variant: EncoderVariant | str, d: int, w: int, e: int,
                 training: TrainingConfig | None = None, seed: int | None = None):
        self.variant = EncoderVariant(variant)
        if not self.variant.trainable:
            raise ConfigError("raw 基线不是可训练的编码器")
        if d < 1 or w < 2 or e < 1:
            raise ConfigError(f"编码器维度非法: d={d}, w={w}, e={e}")
        self.d, self.w, self.e = d, w, e
        self.training = training or TrainingConfig()
        self.seed = self.training.seed if seed is None else seed
        self.logger = logging.getLogger(f"{self.__class__.__name__}[{self.variant.value}]")

        hidden = self.training.hidden_channels
        out_dim = 2 * e if self.variant.variational else e
        generator = nn_core.seeded_generator(self.seed)
        self.encoder = nn_core.uniform_fan_in_(nn_core.TCNEncoder(d, out_dim, hidden), generator)
        heads = {}
        for name in HEADS_BY_VARIANT[self.variant]:
            if name == 'discriminator':
                heads[name] = NeighborhoodDiscriminator(e)
            else:
                heads[name] = WindowDecoder(e, d, w, hidden)
        self.heads = nn_core.uniform_fan_in_(nn.ModuleDict(heads), generator)
        self.frozen = False
        self.steps_trained = 0
        self.final_loss: float | None = None

    # --- 参数 ---

    def parameters(self) -> nn_core.ParameterSet:
        if self.frozen:
            return nn_core.ParameterSet.from_modules(encoder=self.encoder)
        return nn_core.ParameterSet.from_modules(encoder=self.encoder, heads=self.heads)

    def freeze(self) -> 'EncoderModel':
        """丢弃辅助参数，只保留 f；之后的编码是确定性的。"""
        self.heads = nn.ModuleDict()
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        self.encoder.eval()
        self.frozen = True
        return self

    # --- 前向 ---

    def embed(self, x: torch.Tensor):
        """训练用前向: 返回 (嵌入, 均值, 对数方差)；非变分模型后两者为 None。"""
        out = self.encoder(x)
        if self.variant.variational:
            mean, logvar = out[:, :self.e], out[:, self.e:]
            return mean, mean, logvar
        return out, None, None

    def check_window(self, array: np.ndarray):
        if array.shape[-2:] != (self.d, self.w):
            raise ShapeError('encode', array.shape[-2:], (self.d, self.w))

    def encode_batch(self, stack: np.ndarray) -> np.ndarray:
        stack = np.asarray(stack, dtype=np.float64)
        if stack.ndim != 3:
            raise ShapeError('encode_batch', stack.shape, (None, self.d, self.w))
        self.check_window(stack)
        with torch.no_grad():
            z, _, _ = self.embed(nn_core.as_tensor(stack))
        return z.numpy().copy()

    def encode(self, window: np.ndarray) -> np.ndarray:
        """单个 d×w 窗口 → 长度 e 的嵌入 (变分模型返回后验均值，不采样)。"""
        window = np.asarray(window, dtype=np.float64)
        if window.ndim != 2:
            raise ShapeError('encode', window.shape, (self.d, self.w))
        return self.encode_batch(window[None])[0]

    # --- 持久化 ---

    def sidecar(self) -> dict:
        return {
            'variant': self.variant.value, 'd': self.d, 'w': self.w, 'e': self.e,
            'seed': self.seed, 'frozen': self.frozen, 'steps_trained': self.steps_trained,
            'final_loss': self.final_loss, 'training': self.training.model_dump(mode='json'),
        }

    def save(self, path: str) -> str:
        """写出检查点 (path) 和 JSON 附属文件 (path + '.json')。"""
        nn_core.save_checkpoint(path, self.parameters(), self.seed, self.steps_trained)
        write_json(path + '.json', self.sidecar())
        self.logger.info(f"编码器已保存: {path}")
        return path

    @classmethod
    def load(cls, path: str) -> 'EncoderModel':
        sidecar_path = path + '.json'
        if not os.path.exists(sidecar_path):
            raise DataError(f"缺少编码器附属文件: {sidecar_path}")
        meta = read_json(sidecar_path)
        training = TrainingConfig.model_validate(meta['training'])
        model = cls(meta['variant'], meta['d'], meta['w'], meta['e'], training, seed=meta['seed'])
        payload = nn_core.load_checkpoint(path)
        if meta.get('frozen'):
            model.freeze()
        params = model.parameters()
        missing = set(params.names()) ^ set(payload['tensors'].keys())
        if missing:
            raise DataError(f"检查点参数与模型不一致: {sorted(missing)}")
        params.restore(payload['tensors'])
        model.steps_trained = payload['step']
        model.final_loss = meta.get('final_loss')
        return model



def encode_series(model: EncoderModel, series: MultivariateTimeSeries,
                  spec: SlidingWindowSpec | None = None) -> TimeSeriesRepresentation:
    """g(MTS) = [f(S_{1,w}), f(S_{2,w+1}), …]；步长 1 时长度为 N-(w-1)，第 i 行对齐时间步 w+i。"""
    spec = spec or SlidingWindowSpec(model.w, 1)
    if spec.width != model.w:
        raise ShapeError('encode_series', (spec.width,), (model.w,))
    if series.d != model.d:
        raise ShapeError('encode_series', (series.d,), (model.d,))
    if spec.step != 1:
        raise ConfigError("时间戳级表示要求推理步长为 1")
    _, stack = window_stack(series, spec)
    batch = settings.ENCODE_BATCH_SIZE
    rows = [model.encode_batch(stack[i:i + batch]) for i in range(0, len(stack), batch)]
    return TimeSeriesRepresentation(np.vstack(rows), session_id=series.session_id, offset=model.w,
                                    sample_rate_hz=series.sample_rate_hz)


def raw_representation(series: MultivariateTimeSeries, w: int) -> TimeSeriesRepresentation:
    """基线表示: 把每个窗口直接展平成 d·w 维向量。"""
    _, stack = window_stack(series, SlidingWindowSpec(w, 1))
    return TimeSeriesRepresentation(stack.reshape(len(stack), -1), session_id=series.session_id,
                                    offset=w, sample_rate_hz=series.sample_rate_hz)
