# 文件: encoder_trainer.py
"""
编码器训练: 各变体的损失函数、训练样本构造、训练循环，以及 TNC 的平稳邻域估计。

窗口均以 1 起始的结束时间步 t 标识，窗口 S_{t-w+1,t} 对应 data[:, t-w:t]。
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from statsmodels.tsa.stattools import adfuller

import nn_core
from config import EncoderVariant, settings
from encoders import EncoderModel
from errors import ConfigError, DataError, NumericalError
from helpers import derive_seed, run_parallel
from timeseries import MultivariateTimeSeries, SlidingWindowSpec, window_stack

logger = logging.getLogger("EncoderTrainer")

CONSTANT_SPAN_PTP = 1e-12


@dataclass
class TrainResult:
    model: EncoderModel
    loss_history: list = field(default_factory=list)
    component_history: list = field(default_factory=list)

    @property
    def final_loss(self) -> float | None:
        return self.loss_history[-1] if self.loss_history else None


# --- 训练样本 ---

def context_end_indices(n: int, w: int, step: int, with_past: bool = False, with_future: bool = True) -> np.ndarray:
    """在 w, w+step, … 网格上取当前窗口结束点 t，要求相邻的过去/未来窗口完整落在序列内。"""
    last = n - w if with_future else n
    grid = np.arange(w, last + 1, step)
    if with_past:
        grid = grid[grid >= 2 * w]
    return grid


def _windows_at(series: MultivariateTimeSeries, starts: np.ndarray, w: int) -> np.ndarray:
    view = sliding_window_view(series.data, w, axis=1)
    return np.ascontiguousarray(view[:, starts, :].transpose(1, 0, 2))


def make_pairs(collection: list[MultivariateTimeSeries], w: int, step: int):
    """(当前窗口, 紧随其后的下一窗口) 对，返回两个 (M, d, w) 数组。"""
    current, nxt = [], []
    for series in collection:
        ends = context_end_indices(series.n, w, step)
        if ends.size == 0:
            logger.warning(f"[{series.session_id}] 长度 {series.n} 不足以构造窗口对，已跳过")
            continue
        current.append(_windows_at(series, ends - w, w))
        nxt.append(_windows_at(series, ends, w))
    if not current:
        raise DataError(f"没有任何序列足够长 (需要 ≥ {2 * w} 步) 来构造窗口对")
    return np.concatenate(current), np.concatenate(nxt)


def make_triples(collection: list[MultivariateTimeSeries], w: int, step: int, with_past: bool):
    """(过去, 当前, 未来) 三元组；with_past=False 时过去窗口为 None。"""
    past, current, future = [], [], []
    for series in collection:
        ends = context_end_indices(series.n, w, step, with_past=with_past)
        if ends.size == 0:
            continue
        if with_past:
            past.append(_windows_at(series, ends - 2 * w, w))
        current.append(_windows_at(series, ends - w, w))
        future.append(_windows_at(series, ends, w))
    if not current:
        need = 3 * w if with_past else 2 * w
        raise DataError(f"没有任何序列足够长 (需要 ≥ {need} 步) 来构造三元组")
    return (np.concatenate(past) if with_past else None), np.concatenate(current), np.concatenate(future)


def training_windows(collection: list[MultivariateTimeSeries], w: int, step: int) -> np.ndarray:
    spec = SlidingWindowSpec(w, step)
    stacks = [window_stack(s, spec)[1] for s in collection if s.n >= w]
    if not stacks:
        raise DataError(f"没有任何序列长度 ≥ w={w}")
    return np.concatenate(stacks)


class WindowPool:
    """集合中全部长度为 w 的窗口，按 (序列序号, 起点) 寻址。"""

    def __init__(self, collection: list[MultivariateTimeSeries], w: int):
        self.series = [s for s in collection if s.n >= w]
        if not self.series:
            raise DataError(f"没有任何序列长度 ≥ w={w}")
        self.w = w
        self.views = [sliding_window_view(s.data, w, axis=1) for s in self.series]
        self.counts = np.array([v.shape[1] for v in self.views], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)])

    @property
    def total(self) -> int:
        return int(self.offsets[-1])

    def sample(self, rng: np.random.Generator, size: int):
        flat = rng.integers(0, self.total, size=size)
        which = np.searchsorted(self.offsets, flat, side='right') - 1
        return which, flat - self.offsets[which]

    def gather(self, which: np.ndarray, starts: np.ndarray) -> np.ndarray:
        d = self.series[0].d
        out = np.empty((len(starts), d, self.w), dtype=np.float64)
        for i in np.unique(which):
            mask = which == i
            out[mask] = self.views[i][:, starts[mask], :].transpose(1, 0, 2)
        return out


# --- 损失 ---

def _decode_terms(model: EncoderModel, z: torch.Tensor, targets: dict) -> dict:
    return {name: nn_core.mse(model.heads[name](z), target) for name, target in targets.items()}


def _total(terms: dict) -> torch.Tensor:
    values = list(terms.values())
    total = values[0]
    for v in values[1:]:
        total = total + v
    return total


def ae_loss(model: EncoderModel, current: torch.Tensor):
    z, _, _ = model.embed(current)
    terms = _decode_terms(model, z, {'reconstruct': current})
    return _total(terms), terms


def drive2vec_loss(model: EncoderModel, current: torch.Tensor, nxt: torch.Tensor):
    z, _, _ = model.embed(current)
    terms = _decode_terms(model, z, {'reconstruct': current, 'future': nxt})
    return _total(terms), terms


def kl_weight(epoch: int, epochs: int, fraction: float) -> float:
    """KL 权重在前 fraction·epochs 个 epoch 内从 0 线性升到 1。"""
    anneal = fraction * epochs
    if anneal <= 0:
        return 1.0
    return min(1.0, epoch / anneal)


def spectral_kmeans_penalty(z: torch.Tensor, k: int) -> torch.Tensor:
    """k-means 目标的谱松弛: ‖Z‖_F² 减去前 k 个奇异值平方和，按批大小归一。"""
    singular = torch.linalg.svdvals(z)
    return (torch.sum(z ** 2) - torch.sum(singular[:k] ** 2)) / z.shape[0]


def vame_loss(model: EncoderModel, current: torch.Tensor, future: torch.Tensor, past: torch.Tensor | None = None,
              beta_kl: float = 1.0, noise: torch.Tensor | None = None, kmeans_weight: float = 0.0,
              kmeans_k: int = 13):
    """重建 + 未来预测 [+ 过去预测] + β_KL·KL。noise 为 None 时直接用后验均值解码。"""
    if not model.variant.variational:
        raise ConfigError(f"{model.variant.value} 不是变分编码器")
    _, mean, logvar = model.embed(current)
    z = mean if noise is None else nn_core.gaussian_sample(mean, logvar, noise)
    targets = {'reconstruct': current, 'future': future}
    if model.variant is EncoderVariant.VAME_STAR:
        if past is None:
            raise DataError("VAMEstar 训练需要过去窗口")
        targets['past'] = past
    terms = _decode_terms(model, z, targets)
    terms['kl'] = beta_kl * nn_core.kl_standard_normal(mean, logvar)
    if kmeans_weight > 0:
        terms['kmeans'] = kmeans_weight * spectral_kmeans_penalty(mean, kmeans_k)
    return _total(terms), terms


def triplet_objective(z_ref: torch.Tensor, z_pos: torch.Tensor, z_neg: torch.Tensor) -> torch.Tensor:
    """z_ref, z_pos: (B, e)；z_neg: (B, K, e)。批均值的 -log σ(ref·pos) - Σ_k log σ(-ref·neg_k)。"""
    positive = torch.sum(z_ref * z_pos, dim=-1)
    negative = torch.einsum('be,bke->bk', z_ref, z_neg)
    per_sample = -nn_core.log_sigmoid(positive) - torch.sum(nn_core.log_sigmoid(-negative), dim=-1)
    return per_sample.mean()


def tloss_loss(model: EncoderModel, ref_center: torch.Tensor, positive: torch.Tensor, negatives: torch.Tensor):
    b, k = negatives.shape[:2]
    z_ref, _, _ = model.embed(ref_center)
    z_pos, _, _ = model.embed(positive)
    z_neg, _, _ = model.embed(negatives.reshape(b * k, model.d, model.w))
    loss = triplet_objective(z_ref, z_pos, z_neg.reshape(b, k, model.e))
    return loss, {'triplet': loss}


def neighborhood_objective(neighbor_logits: torch.Tensor, distant_logits: torch.Tensor, w_pu: float) -> torch.Tensor:
    """邻居标为 1；远端样本按 PU 权重混合 0/1 两种标签。对全部样本对取均值。"""
    neighbor = nn_core.bce_with_logits(neighbor_logits, 1.0)
    distant = (1.0 - w_pu) * nn_core.bce_with_logits(distant_logits, 0.0) \
        + w_pu * nn_core.bce_with_logits(distant_logits, 1.0)
    return torch.cat([neighbor, distant]).mean()


def tnc_loss(model: EncoderModel, anchors: torch.Tensor, neighbors: torch.Tensor, distants: torch.Tensor,
             w_pu: float):
    z_a, _, _ = model.embed(anchors)
    z_n, _, _ = model.embed(neighbors)
    z_d, _, _ = model.embed(distants)
    discriminator = model.heads['discriminator']
    loss = neighborhood_objective(discriminator(z_a, z_n), discriminator(z_a, z_d), w_pu)
    return loss, {'discriminator': loss}


# --- 平稳邻域 ---

def _is_stationary(x: np.ndarray, alpha: float, maxlag: int) -> bool:
    if np.ptp(x) < CONSTANT_SPAN_PTP:
        return True
    try:
        p_value = adfuller(x, maxlag=maxlag, autolag=None, regression='c')[1]
    except (ValueError, np.linalg.LinAlgError):
        return True
    if not np.isfinite(p_value):
        return True
    return p_value < alpha


def estimate_neighborhood(series, t: int, w: int, alpha: float = 0.01, max_radius: int = 5,
                          maxlag: int = 1) -> int:
    """
    以 w 为步长对称扩张窗口 t 周围的跨度 [t-w+1-r·w, t+r·w]，每次扩张做逐通道 ADF 检验并多数表决；
    检验拒绝平稳或到达 max_radius 时停止，返回最后一个被接受的半径 (至少为 1)。
    """
    data = series.data if isinstance(series, MultivariateTimeSeries) else np.atleast_2d(np.asarray(series, dtype=np.float64))
    d, n = data.shape
    if not w <= t <= n:
        raise DataError(f"锚点结束时间步 t={t} 不在 [{w}, {n}] 内")
    accepted = 1
    for radius in range(1, max_radius + 1):
        lo = max(0, t - w - radius * w)
        hi = min(n, t + radius * w)
        votes = sum(_is_stationary(data[c, lo:hi], alpha, maxlag) for c in range(d))
        if 2 * (d - votes) > d:
            break
        accepted = radius
    return max(accepted, 1)


# --- 训练循环 ---

class EncoderTrainer:
    """单个编码器的训练循环: Adam、按种子打乱的小批量，损失或梯度非有限时回滚到最近一次良好的参数。"""

    def __init__(self, model: EncoderModel):
        if model.frozen:
            raise ConfigError("已冻结的编码器不能继续训练")
        self.model = model
        self.config = model.training
        self.logger = logging.getLogger(f"{self.__class__.__name__}[{model.variant.value}]")
        self.rng = np.random.default_rng(derive_seed(model.seed, 'batches'))
        self.noise = nn_core.seeded_generator(derive_seed(model.seed, 'noise'))
        self.params = model.parameters()
        self.optimizer = nn_core.make_adam(self.params, self.config.learning_rate)
        self.result = TrainResult(model)

    def step(self, loss: torch.Tensor) -> float:
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NumericalError(f"第 {self.model.steps_trained + 1} 步损失为 {value}")
        self.params.zero_grad()
        nn_core.backward(loss)
        nn_core.adam_step(self.params, self.optimizer)
        self.model.steps_trained += 1
        return value

    def _record(self, label: str, index: int, total: int, loss: float, components: dict):
        self.result.loss_history.append(loss)
        self.result.component_history.append(components)
        self.model.final_loss = loss
        if index == 0 or (index + 1) % self.config.log_every == 0 or index + 1 == total:
            detail = ', '.join(f"{k}={v:.5f}" for k, v in components.items())
            self.logger.info(f"{label} {index + 1}/{total}: loss={loss:.6f} ({detail})")

    def _guarded(self, run: Callable[[], tuple]):
        good = self.params.snapshot()
        try:
            return run()
        except NumericalError as e:
            self.params.restore(good)
            self.logger.error(f"训练出现数值错误，已回滚到最近一次良好的参数: {e}")
            raise

    def run_epochs(self, n_samples: int, loss_fn: Callable, epochs: int | None = None) -> TrainResult:
        """loss_fn(idx, epoch) -> (loss, terms)；每个 epoch 记录一次按样本数加权的平均损失。"""
        epochs = self.config.epochs if epochs is None else epochs
        if n_samples == 0:
            raise DataError("训练样本为空")
        batch = self.config.batch_size

        def one_epoch(epoch):
            order = self.rng.permutation(n_samples)
            total, components = 0.0, {}
            for start in range(0, n_samples, batch):
                idx = torch.as_tensor(order[start:start + batch])
                loss, terms = loss_fn(idx, epoch)
                total += self.step(loss) * len(idx)
                for name, term in terms.items():
                    components[name] = components.get(name, 0.0) + float(term.detach()) * len(idx)
            return total / n_samples, {k: v / n_samples for k, v in components.items()}

        for epoch in range(epochs):
            loss, components = self._guarded(lambda: one_epoch(epoch))
            self._record('epoch', epoch, epochs, loss, components)
        return self.result

    def run_steps(self, steps: int, loss_fn: Callable) -> TrainResult:
        """loss_fn(step) -> (loss, terms)，每步记录一次损失。"""
        def one_step(step):
            loss, terms = loss_fn(step)
            value = self.step(loss)
            return value, {k: float(v.detach()) for k, v in terms.items()}

        for step in range(steps):
            loss, components = self._guarded(lambda: one_step(step))
            self._record('step', step, steps, loss, components)
        return self.result


def _require_variant(model: EncoderModel, *variants: EncoderVariant):
    if model.variant not in variants:
        names = '/'.join(v.value for v in variants)
        raise ConfigError(f"该训练过程需要 {names} 编码器，实际为 {model.variant.value}")


def _batch_tensor(model: EncoderModel, array: np.ndarray) -> torch.Tensor:
    array = np.asarray(array, dtype=np.float64)
    if array.ndim != 3:
        raise DataError(f"训练窗口必须是 (M, d, w) 数组，实际形状 {array.shape}")
    model.check_window(array)
    return nn_core.as_tensor(array)


def _same_length(*arrays):
    lengths = {len(a) for a in arrays if a is not None}
    if len(lengths) != 1:
        raise DataError(f"训练样本的各部分数量不一致: {sorted(lengths)}")


def train_ae(model: EncoderModel, windows: np.ndarray) -> TrainResult:
    _require_variant(model, EncoderVariant.AE)
    current = _batch_tensor(model, windows)
    trainer = EncoderTrainer(model)
    return trainer.run_epochs(len(current), lambda idx, epoch: ae_loss(model, current[idx]))


def train_drive2vec(model: EncoderModel, current: np.ndarray, nxt: np.ndarray) -> TrainResult:
    _require_variant(model, EncoderVariant.DRIVE2VEC)
    _same_length(current, nxt)
    cur_t, next_t = _batch_tensor(model, current), _batch_tensor(model, nxt)
    trainer = EncoderTrainer(model)
    return trainer.run_epochs(len(cur_t), lambda idx, epoch: drive2vec_loss(model, cur_t[idx], next_t[idx]))


def train_vame(model: EncoderModel, current: np.ndarray, future: np.ndarray,
               past: np.ndarray | None = None) -> TrainResult:
    _require_variant(model, EncoderVariant.VAME, EncoderVariant.VAME_STAR)
    if model.variant is EncoderVariant.VAME_STAR and past is None:
        raise DataError("VAMEstar 训练需要过去窗口")
    if model.variant is EncoderVariant.VAME:
        past = None
    _same_length(current, future, past)
    cur_t, fut_t = _batch_tensor(model, current), _batch_tensor(model, future)
    past_t = None if past is None else _batch_tensor(model, past)
    cfg = model.training
    trainer = EncoderTrainer(model)

    def loss_fn(idx, epoch):
        noise = torch.randn((len(idx), model.e), generator=trainer.noise, dtype=nn_core.DTYPE)
        return vame_loss(model, cur_t[idx], fut_t[idx], None if past_t is None else past_t[idx],
                         beta_kl=kl_weight(epoch, cfg.epochs, cfg.kl_anneal_fraction), noise=noise,
                         kmeans_weight=cfg.vame_kmeans_weight, kmeans_k=cfg.vame_kmeans_k)

    return trainer.run_epochs(len(cur_t), loss_fn)


def train_tloss(model: EncoderModel, collection: list[MultivariateTimeSeries],
                steps: int | None = None) -> TrainResult:
    """每步: 采样长 multiplier·w 的参考段，取其中心窗口和段内随机子窗口为正样本，再从全集合采 K 个负样本。"""
    _require_variant(model, EncoderVariant.TLOSS)
    cfg = model.training
    w = model.w
    ref_len = cfg.reference_multiplier * w
    pool = WindowPool(collection, w)
    ref_counts = np.array([max(0, s.n - ref_len + 1) for s in pool.series], dtype=np.int64)
    if ref_counts.sum() == 0:
        raise DataError(f"没有任何序列长度 ≥ 参考窗口长度 {ref_len}")
    excluded = int(np.sum(ref_counts == 0))
    if excluded:
        logger.warning(f"{excluded} 个序列短于参考窗口 {ref_len}，不参与参考段采样")
    ref_offsets = np.concatenate([[0], np.cumsum(ref_counts)])
    center_shift = (ref_len - w) // 2
    trainer = EncoderTrainer(model)
    rng = trainer.rng
    batch, k = cfg.batch_size, cfg.tloss_negatives

    def loss_fn(step):
        flat = rng.integers(0, ref_offsets[-1], size=batch)
        which = np.searchsorted(ref_offsets, flat, side='right') - 1
        ref_start = flat - ref_offsets[which]
        pos_start = ref_start + rng.integers(0, ref_len - w + 1, size=batch)
        neg_which, neg_start = pool.sample(rng, batch * k)
        ref_center = nn_core.as_tensor(pool.gather(which, ref_start + center_shift))
        positive = nn_core.as_tensor(pool.gather(which, pos_start))
        negatives = nn_core.as_tensor(pool.gather(neg_which, neg_start).reshape(batch, k, model.d, w))
        return tloss_loss(model, ref_center, positive, negatives)

    return trainer.run_steps(cfg.tloss_steps if steps is None else steps, loss_fn)


def estimate_anchor_radii(pool: WindowPool, w: int, stride: int, alpha: float, max_radius: int,
                          maxlag: int, n_jobs: int = 1):
    """在步长为 stride 的锚点网格上预估邻域半径，返回 (序列序号, 结束时间步, 半径) 三个数组。"""
    anchors = [(i, t) for i, s in enumerate(pool.series) for t in range(w, s.n + 1, stride)]
    radii = run_parallel(
        lambda a: estimate_neighborhood(pool.series[a[0]], a[1], w, alpha, max_radius, maxlag),
        anchors, n_jobs)
    which = np.array([a[0] for a in anchors], dtype=np.int64)
    ends = np.array([a[1] for a in anchors], dtype=np.int64)
    return which, ends, np.array(radii, dtype=np.int64)


def sample_tnc_partners(pool: WindowPool, rng: np.random.Generator, which: np.ndarray, ends: np.ndarray,
                        radii: np.ndarray):
    """对每个锚点采样一个邻域内的窗口结束点和一个邻域外的远端窗口，返回两组 (序列序号, 起点)。"""
    w = pool.w
    lengths = np.array([s.n for s in pool.series], dtype=np.int64)[which]
    span = radii * w
    lo = np.maximum(w, ends - span)
    hi = np.minimum(lengths, ends + span)
    neighbor_ends = lo + (rng.random(len(ends)) * (hi - lo + 1)).astype(np.int64)

    left = np.maximum(0, ends - span - w)            # 结束点 w .. t-span-1
    right = np.maximum(0, lengths - (ends + span))   # 结束点 t+span+1 .. n
    room = left + right
    u = (rng.random(len(ends)) * np.maximum(room, 1)).astype(np.int64)
    distant_ends = np.where(u < left, w + u, ends + span + 1 + (u - left))
    distant_which = which.copy()
    no_room = room == 0
    if np.any(no_room):
        other_which, other_start = pool.sample(rng, int(no_room.sum()))
        distant_which[no_room] = other_which
        distant_ends[no_room] = other_start + w
    return (which, neighbor_ends - w), (distant_which, distant_ends - w)


def train_tnc(model: EncoderModel, collection: list[MultivariateTimeSeries], n_jobs: int | None = None) -> TrainResult:
    _require_variant(model, EncoderVariant.TNC)
    cfg = model.training
    w = model.w
    pool = WindowPool(collection, w)
    stride = cfg.tnc_anchor_stride or w
    which, ends, radii = estimate_anchor_radii(pool, w, stride, cfg.tnc_alpha, cfg.tnc_max_radius,
                                               cfg.tnc_adf_maxlag, n_jobs or settings.N_JOBS)
    logger.info(f"TNC 锚点 {len(ends)} 个，邻域半径分布: "
                f"{dict(zip(*np.unique(radii, return_counts=True)))}")
    trainer = EncoderTrainer(model)

    def loss_fn(idx, epoch):
        idx = idx.numpy()
        a_which, a_end = which[idx], ends[idx]
        (n_which, n_start), (d_which, d_start) = sample_tnc_partners(pool, trainer.rng, a_which, a_end, radii[idx])
        anchors = nn_core.as_tensor(pool.gather(a_which, a_end - w))
        neighbors = nn_core.as_tensor(pool.gather(n_which, n_start))
        distants = nn_core.as_tensor(pool.gather(d_which, d_start))
        return tnc_loss(model, anchors, neighbors, distants, cfg.tnc_w_pu)

    return trainer.run_epochs(len(ends), loss_fn)


def train_encoder(model: EncoderModel, collection: list[MultivariateTimeSeries], freeze: bool = True,
                  n_jobs: int | None = None) -> TrainResult:
    """按变体构造训练样本 (训练步长 train_step) 并训练；默认训练完成后冻结。"""
    cfg = model.training
    w, step = model.w, cfg.train_step
    logger.info(f"开始训练 {model.variant.value}: d={model.d}, w={w}, e={model.e}, 序列 {len(collection)} 条")
    variant = model.variant
    if variant is EncoderVariant.AE:
        result = train_ae(model, training_windows(collection, w, step))
    elif variant is EncoderVariant.DRIVE2VEC:
        result = train_drive2vec(model, *make_pairs(collection, w, step))
    elif variant.variational:
        past, current, future = make_triples(collection, w, step, with_past=variant is EncoderVariant.VAME_STAR)
        result = train_vame(model, current, future, past)
    elif variant is EncoderVariant.TLOSS:
        result = train_tloss(model, collection)
    elif variant is EncoderVariant.TNC:
        result = train_tnc(model, collection, n_jobs)
    else:
        raise ConfigError(f"未知编码器变体: {variant}")
    if freeze:
        model.freeze()
    logger.info(f"{variant.value} 训练完成, 共 {model.steps_trained} 步, 最终损失 {result.final_loss}")
    return result
