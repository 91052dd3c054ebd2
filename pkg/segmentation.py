# 文件: segmentation.py
"""
聚类序列 → 变长分段 → 按聚类分组的事件。时长过滤只作用于报告，不修改聚类序列本身。
"""

import json
import logging
import os
from dataclasses import dataclass, field

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from clustering import ClusterAssignmentSequence
from errors import ConfigError, DataError
from timeseries import MultivariateTimeSeries

logger = logging.getLogger("Segmentation")


@dataclass(frozen=True)
class Segment:
    session_id: str
    start: int          # 含端点，原序列时间步
    end: int
    cluster: int
    seconds: float

    @property
    def length(self) -> int:
        return self.end - self.start + 1

    def to_dict(self) -> dict:
        return {'session': self.session_id, 'start': self.start, 'end': self.end,
                'cluster': self.cluster, 'seconds': self.seconds}


@dataclass
class SegmentSet:
    segments: list = field(default_factory=list)
    sample_rate_hz: float = 10.0

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    def by_cluster(self) -> dict:
        index = {}
        for seg in self.segments:
            index.setdefault(seg.cluster, []).append(seg)
        return dict(sorted(index.items()))

    def sessions(self) -> list[str]:
        return list(dict.fromkeys(seg.session_id for seg in self.segments))

    def for_session(self, session_id: str) -> list:
        return [seg for seg in self.segments if seg.session_id == session_id]

    @classmethod
    def merge(cls, sets: list['SegmentSet']) -> 'SegmentSet':
        if not sets:
            return cls()
        return cls([seg for s in sets for seg in s.segments], sets[0].sample_rate_hz)


def segment(seq: ClusterAssignmentSequence, sample_rate_hz: float = 10.0) -> SegmentSet:
    """极大的常值游程即为分段。"""
    clusters = seq.clusters
    if len(clusters) == 0:
        raise DataError(f"[{seq.session_id}] 聚类序列为空，无法分段")
    if sample_rate_hz <= 0:
        raise ConfigError(f"采样率必须为正数: {sample_rate_hz}")
    change = np.flatnonzero(clusters[1:] != clusters[:-1]) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change - 1, [len(clusters) - 1]])
    segments = [Segment(seq.session_id, int(seq.offset + s), int(seq.offset + e), int(clusters[s]),
                        (e - s + 1) / sample_rate_hz)
                for s, e in zip(starts, ends)]
    return SegmentSet(segments, sample_rate_hz)


def flatten(segment_set: SegmentSet, session_id: str | None = None) -> np.ndarray:
    """按分段长度重复聚类编号，重建聚类序列。"""
    segments = segment_set.segments if session_id is None else segment_set.for_session(session_id)
    if not segments:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([np.full(seg.length, seg.cluster, dtype=np.int64) for seg in segments])


def filter_min_duration(segment_set: SegmentSet, min_seconds: float, sample_rate_hz: float | None = None) -> SegmentSet:
    """只保留时长严格大于 min_seconds 的分段；幸存分段的边界不变。"""
    if min_seconds < 0:
        raise ConfigError(f"最短时长必须 ≥ 0，当前 {min_seconds}")
    rate = sample_rate_hz or segment_set.sample_rate_hz
    if min_seconds == 0:
        return SegmentSet(list(segment_set.segments), rate)
    kept = [seg for seg in segment_set.segments if seg.length / rate > min_seconds]
    if segment_set.segments and not kept:
        logger.warning(f"所有 {len(segment_set)} 个分段都不长于 {min_seconds:g} 秒，报告为空")
    return SegmentSet(kept, rate)


@dataclass
class ClusterSummary:
    cluster: int
    channels: tuple
    segments: list
    traces: np.ndarray      # (n_segments, d, L)
    mean: np.ndarray        # (d, L)

    @property
    def length(self) -> int:
        return self.mean.shape[1]


def stretch(trace: np.ndarray, length: int) -> np.ndarray:
    """把 (d, L0) 轨迹线性插值到 length 个等距点。"""
    current = trace.shape[1]
    if current == length:
        return trace.copy()
    source = np.arange(current)
    target = np.linspace(0, current - 1, length)
    return np.vstack([np.interp(target, source, row) for row in trace])


def summarize_cluster(segment_set: SegmentSet, cluster: int, series) -> ClusterSummary:
    """
    各分段的原始通道轨迹拉伸到该聚类最长分段的长度，再逐点求均值。
    series 可以是单个 MultivariateTimeSeries 或 {session_id: series} 字典。
    """
    groups = segment_set.by_cluster()
    if cluster not in groups:
        raise DataError(f"聚类 {cluster} 在分段集合中不存在 (已有: {sorted(groups)})")
    members = groups[cluster]
    lookup = series if isinstance(series, dict) else {seg.session_id: series for seg in members}
    length = max(seg.length for seg in members)
    traces, channels = [], None
    for seg in members:
        source: MultivariateTimeSeries = lookup.get(seg.session_id)
        if source is None:
            raise DataError(f"缺少会话 {seg.session_id} 的原始序列")
        if seg.start < 1 or seg.end > source.n:
            raise DataError(f"分段 [{seg.start}, {seg.end}] 超出会话 {seg.session_id} 的范围 1..{source.n}")
        channels = source.channels
        traces.append(stretch(source.data[:, seg.start - 1:seg.end], length))
    stack = np.stack(traces)
    return ClusterSummary(cluster, channels, members, stack, stack.mean(axis=0))


# --- 导出 ---

def write_segments_jsonl(segment_set: SegmentSet, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for seg in segment_set:
            f.write(json.dumps(seg.to_dict(), sort_keys=True) + '\n')
    return path


def read_segments_jsonl(path: str, sample_rate_hz: float = 10.0) -> SegmentSet:
    if not os.path.exists(path):
        raise DataError(f"文件不存在: {path}")
    segments = []
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            if line.strip():
                row = json.loads(line)
                segments.append(Segment(str(row['session']), int(row['start']), int(row['end']),
                                        int(row['cluster']), float(row['seconds'])))
    return SegmentSet(segments, sample_rate_hz)


def write_summary_csv(summary: ClusterSummary, path: str) -> str:
    """每行一条轨迹: 通道名、轨迹名 (会话:起-止 或 mean)、各位置的值。"""
    rows = []
    for c, channel in enumerate(summary.channels):
        for seg, trace in zip(summary.segments, summary.traces):
            rows.append([channel, f"{seg.session_id}:{seg.start}-{seg.end}", *trace[c]])
        rows.append([channel, 'mean', *summary.mean[c]])
    columns = ['channel', 'trace'] + [f"p{i}" for i in range(summary.length)]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False)
    return path


def plot_summary_svg(summary: ClusterSummary, path: str) -> str:
    """小多图: 每个通道一个面板，灰色为各分段，黑色虚线为均值。"""
    d = len(summary.channels)
    cols = min(3, d)
    rows = int(np.ceil(d / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 2.5 * rows), squeeze=False)
    x = np.arange(summary.length)
    for c, channel in enumerate(summary.channels):
        ax = axes[c // cols][c % cols]
        for trace in summary.traces:
            ax.plot(x, trace[c], color='grey', alpha=0.4, linewidth=0.8)
        ax.plot(x, summary.mean[c], color='black', linestyle='--', linewidth=1.5)
        ax.set_title(channel, fontsize=9)
    for extra in range(d, rows * cols):
        axes[extra // cols][extra % cols].axis('off')
    fig.suptitle(f"cluster {summary.cluster} ({len(summary.segments)} segments)")
    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, format='svg')
    plt.close(fig)
    return path


def write_cluster_reports(segment_set: SegmentSet, series_by_session: dict, out_dir: str,
                          min_seconds: float = 3.0) -> list[str]:
    """按时长过滤后，为每个仍有分段的聚类写出汇总 CSV 和 SVG。"""
    report = filter_min_duration(segment_set, min_seconds)
    written = []
    for cluster in report.by_cluster():
        summary = summarize_cluster(report, cluster, series_by_session)
        written.append(write_summary_csv(summary, os.path.join(out_dir, f"cluster_{cluster:02d}.csv")))
        written.append(plot_summary_svg(summary, os.path.join(out_dir, f"cluster_{cluster:02d}.svg")))
    logger.info(f"已为 {len(report.by_cluster())} 个聚类写出事件汇总 (分段 {len(report)}/{len(segment_set)})")
    return written
