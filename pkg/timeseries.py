# 文件: timeseries.py
"""
多变量时间序列的表示、读写、预处理与滑动窗口。

时间步在全项目中统一为 1 起始: 窗口 S_{t-(w-1), t} 以其结束时间步 t 标识，
t 的取值范围为 w..N。
"""

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from errors import ConfigError, DataError

logger = logging.getLogger("TimeSeries")

NO_LABEL = -1
DEGENERATE_STD = 1e-12
RESERVED_COLUMNS = ('t', 'label', 'lat', 'lon')


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class MultivariateTimeSeries:
    """d 通道、N 步的序列。data 形状为 (d, N)，构造后只读。"""
    channels: tuple
    data: np.ndarray
    sample_rate_hz: float
    labels: np.ndarray | None = None          # (N,) int64，NO_LABEL 表示该步无标注
    coordinates: np.ndarray | None = None     # (N, 2) 纬度/经度
    session_id: str = 'session'

    def __post_init__(self):
        channels = tuple(str(c) for c in self.channels)
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim == 1:
            data = data[None, :]
        if data.ndim != 2:
            raise DataError(f"序列数据必须是二维 (d, N)，实际维度 {data.ndim}")
        d, n = data.shape
        if d < 1 or n < 1:
            raise DataError(f"序列为空: d={d}, N={n}")
        if len(channels) != d:
            raise DataError(f"通道名数量 {len(channels)} 与数据行数 {d} 不一致")
        if len(set(channels)) != d:
            raise DataError(f"通道名重复: {channels}")
        if not self.sample_rate_hz or self.sample_rate_hz <= 0:
            raise ConfigError(f"采样率必须为正数: {self.sample_rate_hz}")
        object.__setattr__(self, 'channels', channels)
        object.__setattr__(self, 'data', _readonly(data))
        object.__setattr__(self, 'sample_rate_hz', float(self.sample_rate_hz))
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64).copy()
            if labels.shape != (n,):
                raise DataError(f"标签长度 {labels.shape} 与序列长度 N={n} 不一致")
            object.__setattr__(self, 'labels', _readonly(labels))
        if self.coordinates is not None:
            coords = np.array(self.coordinates, dtype=np.float64, copy=True)
            if coords.shape != (n, 2):
                raise DataError(f"坐标形状 {coords.shape} 应为 ({n}, 2)")
            object.__setattr__(self, 'coordinates', _readonly(coords))

    @property
    def d(self) -> int:
        return self.data.shape[0]

    @property
    def n(self) -> int:
        return self.data.shape[1]

    @property
    def duration_seconds(self) -> float:
        return self.n / self.sample_rate_hz

    def with_data(self, data: np.ndarray, **changes) -> 'MultivariateTimeSeries':
        fields = dict(channels=self.channels, data=data, sample_rate_hz=self.sample_rate_hz,
                      labels=self.labels, coordinates=self.coordinates, session_id=self.session_id)
        fields.update(changes)
        return MultivariateTimeSeries(**fields)

    def select_channels(self, channels: list[str]) -> 'MultivariateTimeSeries':
        missing = [c for c in channels if c not in self.channels]
        if missing:
            raise DataError(f"[{self.session_id}] 缺少通道: {missing}")
        idx = [self.channels.index(c) for c in channels]
        return self.with_data(self.data[idx], channels=tuple(channels))


@dataclass(frozen=True)
class SlidingWindowSpec:
    width: int
    step: int = 1

    def __post_init__(self):
        if self.width < 2:
            raise ConfigError(f"窗口宽度 w 必须 ≥ 2，当前 {self.width}")
        if self.step < 1:
            raise ConfigError(f"窗口步长必须 ≥ 1，当前 {self.step}")

    def check(self, n: int):
        if n < self.width:
            raise DataError(f"序列长度 N={n} 小于窗口宽度 w={self.width}")

    def end_indices(self, n: int) -> np.ndarray:
        self.check(n)
        return np.arange(self.width, n + 1, self.step)


@dataclass
class TimeSeriesRepresentation:
    """编码后的序列，values 形状 (M, e)；第 i 行对应原序列的时间步 offset + i。"""
    values: np.ndarray
    session_id: str = 'session'
    offset: int = 1
    sample_rate_hz: float = 10.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"表示矩阵必须是二维 (M, e)，实际 {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"[{self.session_id}] 表示中存在非有限值")

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def e(self) -> int:
        return self.values.shape[1]

    @property
    def timesteps(self) -> np.ndarray:
        return np.arange(self.offset, self.offset + self.m)


@dataclass
class CsvSchema:
    """CSV 列映射。channels 为 None 时使用除保留列外的全部列。"""
    channels: list[str] | None = None
    time_column: str = 't'
    label_column: str = 'label'
    lat_column: str = 'lat'
    lon_column: str = 'lon'
    sample_rate_hz: float | None = None
    reserved: tuple = field(default=RESERVED_COLUMNS)


def _check_ragged(path: str) -> int:
    """逐行检查列数一致，返回数据行数。"""
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header:
            raise DataError(f"CSV 文件为空: {path}")
        rows = 0
        for line_no, row in enumerate(reader, start=1):
            if not row:
                continue
            rows += 1
            if len(row) != len(header):
                raise DataError(f"{path}: 第 {line_no} 行有 {len(row)} 列，表头有 {len(header)} 列",
                                row=line_no)
    if rows == 0:
        raise DataError(f"CSV 文件没有数据行: {path}")
    return rows


def _parse_float_column(values: pd.Series, column: str, path: str) -> np.ndarray:
    try:
        parsed = values.to_numpy(dtype=str).astype(np.float64)
    except ValueError:
        for row, cell in enumerate(values, start=1):
            try:
                float(cell)
            except ValueError:
                raise DataError(f"{path}: 第 {row} 行 '{column}' 列不是数值: {cell!r}", row=row, column=column)
        raise
    bad = np.flatnonzero(~np.isfinite(parsed))
    if bad.size:
        row = int(bad[0]) + 1
        raise DataError(f"{path}: 第 {row} 行 '{column}' 列不是有限数值", row=row, column=column)
    return parsed


def _parse_label_column(values: pd.Series, column: str, path: str) -> np.ndarray:
    labels = np.full(len(values), NO_LABEL, dtype=np.int64)
    for row, cell in enumerate(values, start=1):
        text = str(cell).strip()
        if text == '':
            continue
        try:
            number = float(text)
        except ValueError:
            raise DataError(f"{path}: 第 {row} 行标签不是整数: {cell!r}", row=row, column=column)
        if not number.is_integer():
            raise DataError(f"{path}: 第 {row} 行标签不是整数: {cell!r}", row=row, column=column)
        labels[row - 1] = int(number)
    return labels


def ingest_csv(path: str, schema: CsvSchema | None = None, session_id: str | None = None) -> MultivariateTimeSeries:
    """读取已解码的信号 CSV。"""
    schema = schema or CsvSchema()
    if not os.path.exists(path):
        raise DataError(f"文件不存在: {path}")
    if os.path.getsize(path) == 0:
        raise DataError(f"CSV 文件为空: {path}")
    _check_ragged(path)

    df = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=True)
    columns = list(df.columns)
    if len(set(columns)) != len(columns):
        raise DataError(f"{path}: 表头存在重复列名")

    reserved = {schema.time_column, schema.label_column, schema.lat_column, schema.lon_column}
    channels = schema.channels or [c for c in columns if c not in reserved]
    if not channels:
        raise DataError(f"{path}: 没有可用的信号通道")
    missing = [c for c in channels if c not in columns]
    if missing:
        raise DataError(f"{path}: 缺少通道列 {missing}", column=missing[0])

    data = np.vstack([_parse_float_column(df[c], c, path) for c in channels])

    labels = None
    if schema.label_column in columns:
        labels = _parse_label_column(df[schema.label_column], schema.label_column, path)

    coordinates = None
    if schema.lat_column in columns and schema.lon_column in columns:
        coordinates = np.column_stack([
            _parse_float_column(df[schema.lat_column], schema.lat_column, path),
            _parse_float_column(df[schema.lon_column], schema.lon_column, path),
        ])

    rate = schema.sample_rate_hz
    if rate is None and schema.time_column in columns and len(df) > 1:
        t = _parse_float_column(df[schema.time_column], schema.time_column, path)
        dt = float(np.median(np.diff(t)))
        if dt > 0:
            rate = float(round(1.0 / dt, 6))
            logger.info(f"{path}: 由 '{schema.time_column}' 列推断采样率 {rate:.6g} Hz")
    if rate is None:
        rate = 10.0
        logger.warning(f"{path}: 未给出采样率且无法推断，默认使用 10 Hz")

    session = session_id or os.path.splitext(os.path.basename(path))[0]
    series = MultivariateTimeSeries(channels=tuple(channels), data=data, sample_rate_hz=rate,
                                    labels=labels, coordinates=coordinates, session_id=session)
    logger.info(f"已读取 {path}: d={series.d}, N={series.n}, 采样率 {series.sample_rate_hz:g} Hz")
    return series


def export_csv(series: MultivariateTimeSeries, path: str) -> str:
    """写出与 ingest_csv 相同格式的 CSV；浮点按最短可回读表示输出。"""
    frame = {'t': np.arange(series.n) / series.sample_rate_hz}
    for name, row in zip(series.channels, series.data):
        frame[name] = row
    df = pd.DataFrame(frame)
    if series.labels is not None:
        df['label'] = pd.array(np.where(series.labels == NO_LABEL, None, series.labels), dtype='Int64')
    if series.coordinates is not None:
        df['lat'] = series.coordinates[:, 0]
        df['lon'] = series.coordinates[:, 1]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    df.to_csv(path, index=False)
    return path


def _majority(block: np.ndarray) -> int:
    values, first_pos, counts = np.unique(block, return_index=True, return_counts=True)
    best = counts.max()
    candidates = first_pos[counts == best]
    return int(block[candidates.min()])


def resample(series: MultivariateTimeSeries, target_hz: float) -> MultivariateTimeSeries:
    """块均值降采样，要求 sample_rate_hz / target_hz 为整数 r；尾部不足 r 的样本丢弃。"""
    if target_hz is None or target_hz <= 0:
        raise ConfigError(f"目标采样率必须为正数: {target_hz}")
    ratio = series.sample_rate_hz / target_hz
    r = int(round(ratio))
    if r < 1 or abs(ratio - r) > 1e-9 * max(ratio, 1.0):
        raise ConfigError(f"降采样比例 {series.sample_rate_hz:g}/{target_hz:g} = {ratio:.6g} 不是整数")
    if r == 1:
        return series
    n_out = series.n // r
    if n_out == 0:
        raise DataError(f"[{series.session_id}] 序列长度 {series.n} 小于降采样因子 {r}")
    used = n_out * r
    data = series.data[:, :used].reshape(series.d, n_out, r).mean(axis=2)
    labels = None
    if series.labels is not None:
        blocks = series.labels[:used].reshape(n_out, r)
        labels = np.array([_majority(b) for b in blocks], dtype=np.int64)
    coords = None
    if series.coordinates is not None:
        coords = series.coordinates[:used].reshape(n_out, r, 2).mean(axis=1)
    logger.debug(f"[{series.session_id}] 降采样 {series.sample_rate_hz:g} Hz -> {target_hz:g} Hz, r={r}, N {series.n} -> {n_out}")
    return series.with_data(data, sample_rate_hz=series.sample_rate_hz / r, labels=labels, coordinates=coords)


@dataclass(frozen=True)
class NormalizationStats:
    """逐通道的均值/总体标准差；degenerate 标记零方差通道。"""
    channels: tuple
    mean: np.ndarray
    std: np.ndarray
    degenerate: tuple

    def apply(self, series: MultivariateTimeSeries) -> MultivariateTimeSeries:
        if tuple(series.channels) != tuple(self.channels):
            raise DataError(f"[{series.session_id}] 通道与归一化统计量不一致: {series.channels} vs {self.channels}")
        safe_std = np.where(np.asarray(self.degenerate), 1.0, self.std)
        out = (series.data - self.mean[:, None]) / safe_std[:, None]
        out[np.asarray(self.degenerate, dtype=bool)] = 0.0
        return series.with_data(out)

    def inverse(self, data: np.ndarray) -> np.ndarray:
        return np.asarray(data) * self.std[:, None] + self.mean[:, None]

    def to_dict(self) -> dict:
        return {'channels': list(self.channels), 'mean': self.mean.tolist(), 'std': self.std.tolist(),
                'degenerate': list(self.degenerate)}

    @classmethod
    def from_dict(cls, data: dict) -> 'NormalizationStats':
        return cls(tuple(data['channels']), np.asarray(data['mean'], dtype=np.float64),
                   np.asarray(data['std'], dtype=np.float64), tuple(bool(x) for x in data['degenerate']))


def _stats_from_matrix(channels, data: np.ndarray) -> NormalizationStats:
    mean = data.mean(axis=1)
    std = data.std(axis=1)  # 总体标准差 (除以 N)
    degenerate = tuple(bool(s < DEGENERATE_STD) for s in std)
    for name, flag in zip(channels, degenerate):
        if flag:
            logger.warning(f"通道 '{name}' 方差为零，归一化后置为全零")
    return NormalizationStats(tuple(channels), mean, std, degenerate)


def fit_normalization(collection: list[MultivariateTimeSeries]) -> NormalizationStats:
    """在整个训练集合上拟合统计量 (collection 作用域)。"""
    if not collection:
        raise DataError("归一化需要至少一个序列")
    channels = collection[0].channels
    for s in collection[1:]:
        if s.channels != channels:
            raise DataError(f"[{s.session_id}] 通道与集合中其他序列不一致")
    return _stats_from_matrix(channels, np.hstack([s.data for s in collection]))


def znormalize(series: MultivariateTimeSeries, stats: NormalizationStats | None = None):
    """逐通道 Z 归一化，返回 (归一化序列, 统计量)。传入 stats 时按其变换 (测试集沿用训练统计量)。"""
    if stats is None:
        stats = _stats_from_matrix(series.channels, series.data)
    return stats.apply(series), stats


def window_stack(series: MultivariateTimeSeries, spec: SlidingWindowSpec):
    """返回 (结束时间步数组, 窗口张量 (M, d, w))，窗口是连续的列切片。"""
    ends = spec.end_indices(series.n)
    view = sliding_window_view(series.data, spec.width, axis=1)  # (d, N-w+1, w)
    stack = np.ascontiguousarray(view[:, ends - spec.width, :].transpose(1, 0, 2))
    return ends, stack


def windows(series: MultivariateTimeSeries, spec: SlidingWindowSpec) -> list[tuple[int, np.ndarray]]:
    """按时间顺序列出 (结束时间步 t, d×w 窗口)。"""
    ends, stack = window_stack(series, spec)
    return [(int(t), stack[i]) for i, t in enumerate(ends)]
