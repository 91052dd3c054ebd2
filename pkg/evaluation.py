# 文件: evaluation.py
"""
用真值标签给发现的事件打分: 聚类→标签映射 (最大重叠)、时间步级宏 F1、线性探针、嵌入导出。
真值与表示对齐的方式: 丢弃前 w-1 个标签，使第 i 个标签对应时间步 w+i。
"""

import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.linear_model import SGDClassifier
from sklearn.metrics import accuracy_score, f1_score, precision_recall_fscore_support, silhouette_score
from sklearn.model_selection import StratifiedKFold
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from errors import DataError
from helpers import derive_seed, run_parallel, write_json
from timeseries import NO_LABEL, MultivariateTimeSeries, TimeSeriesRepresentation

logger = logging.getLogger("Evaluation")

UNMATCHED = -2
UNMATCHED_NAME = '<unmatched>'


def align_labels(labels: np.ndarray, w: int) -> np.ndarray:
    """丢弃前 w-1 个标签，与窗口结束时间步对齐。"""
    labels = np.asarray(labels)
    if len(labels) < w:
        raise DataError(f"标签长度 {len(labels)} 小于窗口宽度 w={w}")
    return labels[w - 1:]


def _check_lengths(pred, truth):
    if len(pred) != len(truth):
        raise DataError(f"预测长度 {len(pred)} 与对齐后的真值长度 {len(truth)} 不一致")


def _labeled_mask(truth: np.ndarray) -> np.ndarray:
    if truth.dtype.kind in 'iu':
        return truth != NO_LABEL
    return np.array([t is not None and t == t and t != '' for t in truth], dtype=bool)


def _unmatched_for(truth: np.ndarray):
    return UNMATCHED if truth.dtype.kind in 'iuf' else UNMATCHED_NAME


def confusion_counts(pred, truth, clusters=None) -> pd.DataFrame:
    """行为聚类、列为标签的重叠计数，只统计有标注的时间步。"""
    pred, truth = np.asarray(pred), np.asarray(truth)
    _check_lengths(pred, truth)
    mask = _labeled_mask(truth)
    table = pd.crosstab(pd.Series(pred[mask], name='cluster'), pd.Series(truth[mask], name='label'))
    if clusters is not None:
        table = table.reindex(index=list(clusters), fill_value=0)
    return table.sort_index(axis=0).sort_index(axis=1)


def map_clusters(pred, truth, clusters=None) -> dict:
    """每个聚类映射到重叠最多的标签 (允许多对一，并列取较小的标签)；没有任何重叠的聚类映射为 None。"""
    pred = np.asarray(pred)
    if clusters is None:
        clusters = np.unique(pred)
    table = confusion_counts(pred, truth, clusters)
    mapping = {}
    for cluster, row in table.iterrows():
        mapping[cluster] = row.idxmax() if len(row) and row.max() > 0 else None
    return mapping


def apply_mapping(pred, mapping: dict, truth=None) -> np.ndarray:
    truth = np.asarray(truth) if truth is not None else np.asarray(list(mapping.values()))
    unmatched = _unmatched_for(truth)
    mapped = [mapping.get(c) for c in np.asarray(pred).tolist()]
    return np.array([unmatched if m is None else m for m in mapped])


def macro_f1(pred_labels, truth) -> tuple[float, dict]:
    """时间步级逐类 F1；真值中出现但从未被预测的类记 0；宏 F1 是所有真值类的无权平均。"""
    pred_labels, truth = np.asarray(pred_labels), np.asarray(truth)
    _check_lengths(pred_labels, truth)
    mask = _labeled_mask(truth)
    y_true, y_pred = truth[mask], pred_labels[mask]
    classes = sorted(np.unique(y_true).tolist())
    if not classes:
        return 0.0, {}
    scores = f1_score(y_true, y_pred, labels=classes, average=None, zero_division=0)
    per_class = {c: float(s) for c, s in zip(classes, scores)}
    return float(np.mean(scores)), per_class


# --- 线性探针 ---

@dataclass
class ProbeReport:
    accuracy: float
    macro_f1: float
    per_class_f1: dict
    folds: int
    n_samples: int
    excluded_classes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {'accuracy': self.accuracy, 'macro_f1': self.macro_f1, 'per_class_f1': self.per_class_f1,
                'folds': self.folds, 'n_samples': self.n_samples, 'excluded_classes': self.excluded_classes}


def linear_probe(embeddings, labels, folds: int = 10, seed: int = 42, c: float = 1.0,
                 n_jobs: int = 1) -> ProbeReport:
    """
    一对多线性 SVM (hinge + L2, 随机次梯度下降) 的分层 K 折交叉验证；报告测试折的平均指标。
    样本数少于折数的类被排除并告警。
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if len(x) != len(y):
        raise DataError(f"嵌入数 {len(x)} 与标签数 {len(y)} 不一致")
    mask = _labeled_mask(y)
    x, y = x[mask], y[mask]
    classes, counts = np.unique(y, return_counts=True)
    excluded = [cls.item() if hasattr(cls, 'item') else cls for cls, n in zip(classes, counts) if n < folds]
    if excluded:
        logger.warning(f"以下类别的样本数少于折数 {folds}，已排除: {excluded}")
        keep = ~np.isin(y, excluded)
        x, y = x[keep], y[keep]
    kept = sorted(np.unique(y).tolist())
    if len(kept) < 2:
        raise DataError(f"线性探针至少需要两个类别 (排除后剩余 {kept})")

    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=derive_seed(seed, 'probe-folds') % (2 ** 31))
    splits = list(splitter.split(x, y))

    def run_fold(item):
        fold, (train_idx, test_idx) = item
        classifier = make_pipeline(
            StandardScaler(),
            SGDClassifier(loss='hinge', penalty='l2', alpha=1.0 / (c * len(train_idx)), max_iter=1000, tol=1e-4,
                          random_state=derive_seed(seed, 'probe', fold) % (2 ** 31)),
        )
        classifier.fit(x[train_idx], y[train_idx])
        predicted = classifier.predict(x[test_idx])
        scores = f1_score(y[test_idx], predicted, labels=kept, average=None, zero_division=0)
        return accuracy_score(y[test_idx], predicted), scores

    results = run_parallel(run_fold, list(enumerate(splits)), n_jobs)
    accuracy = float(np.mean([r[0] for r in results]))
    per_class = np.mean([r[1] for r in results], axis=0)
    report = ProbeReport(accuracy, float(per_class.mean()), {k: float(v) for k, v in zip(kept, per_class)},
                         folds, int(len(y)), excluded)
    logger.info(f"线性探针: 准确率 {report.accuracy:.4f}, 宏 F1 {report.macro_f1:.4f} ({folds} 折, {len(y)} 个样本)")
    return report


def embedding_silhouette(embeddings, labels, sample_size: int | None = 2000, seed: int = 42) -> float:
    """按真值标签计算嵌入的轮廓系数 (大数据时随机抽样)。"""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    mask = _labeled_mask(y)
    x, y = x[mask], y[mask]
    if len(np.unique(y)) < 2:
        raise DataError("轮廓系数至少需要两个类别")
    size = sample_size if sample_size and sample_size < len(x) else None
    return float(silhouette_score(x, y, sample_size=size, random_state=derive_seed(seed, 'silhouette') % (2 ** 31)))


# --- 报告 ---

@dataclass
class EvaluationReport:
    mapping: dict
    per_class: dict              # 标签 → {precision, recall, f1, support}
    macro_f1: float
    confusion: pd.DataFrame
    n_labeled: int
    probe: ProbeReport | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            'mapping': {str(k): v for k, v in self.mapping.items()},
            'per_class': {str(k): v for k, v in self.per_class.items()},
            'macro_f1': self.macro_f1,
            'confusion': {
                'clusters': [int(c) for c in self.confusion.index],
                'labels': [str(l) for l in self.confusion.columns],
                'counts': self.confusion.to_numpy().tolist(),
            },
            'n_labeled': self.n_labeled,
            'probe': self.probe.to_dict() if self.probe else None,
            'config': self.config,
        }


def evaluate_assignments(pred, truth, k: int | None = None, probe: ProbeReport | None = None,
                         config: dict | None = None) -> EvaluationReport:
    """pred 与 truth 必须已经对齐 (等长)。"""
    pred, truth = np.asarray(pred), np.asarray(truth)
    _check_lengths(pred, truth)
    clusters = range(k) if k is not None else None
    mapping = map_clusters(pred, truth, clusters)
    mapped = apply_mapping(pred, mapping, truth)
    macro, _ = macro_f1(mapped, truth)
    mask = _labeled_mask(truth)
    classes = sorted(np.unique(truth[mask]).tolist())
    per_class = {}
    if classes:
        precision, recall, f1, support = precision_recall_fscore_support(
            truth[mask], mapped[mask], labels=classes, zero_division=0)
        per_class = {c: {'precision': float(p), 'recall': float(r), 'f1': float(f), 'support': int(s)}
                     for c, p, r, f, s in zip(classes, precision, recall, f1, support)}
        for c, stats in per_class.items():
            if stats['f1'] == 0.0:
                logger.warning(f"类别 {c} 没有被任何聚类映射到 (F1=0)")
    confusion = confusion_counts(pred, truth, clusters)
    report = EvaluationReport(mapping, per_class, macro, confusion, int(mask.sum()), probe, config or {})
    logger.info(f"评估完成: 宏 F1 = {macro:.4f}, 有标注时间步 {report.n_labeled}")
    return report


def write_report(report: EvaluationReport, out_dir: str) -> list[str]:
    report_path = write_json(os.path.join(out_dir, 'report.json'), report.to_dict())
    confusion_path = os.path.join(out_dir, 'confusion.csv')
    report.confusion.to_csv(confusion_path)
    return [report_path, confusion_path]


# --- 导出 ---

def _optional_column(values, n: int):
    if values is None:
        return pd.array([pd.NA] * n, dtype='Int64')
    values = np.asarray(values)
    if len(values) != n:
        raise DataError(f"列长度 {len(values)} 与表示长度 {n} 不一致")
    if values.dtype.kind in 'iu':
        return pd.array(np.where(values == NO_LABEL, None, values), dtype='Int64')
    return values


def export_embeddings(representation: TimeSeriesRepresentation, path: str, truth=None, pred=None,
                      append: bool = False) -> str:
    """CSV 行: session, t, z0..z{e-1}, truth, pred；无标签时 truth 列为空。"""
    frame = pd.DataFrame({'session': representation.session_id, 't': representation.timesteps})
    for i in range(representation.e):
        frame[f"z{i}"] = representation.values[:, i]
    frame['truth'] = _optional_column(truth, representation.m)
    frame['pred'] = _optional_column(pred, representation.m)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    header = not (append and os.path.exists(path))
    frame.to_csv(path, index=False, mode='a' if append else 'w', header=header)
    return path


def read_embeddings(path: str, sample_rate_hz: float = 10.0) -> list[TimeSeriesRepresentation]:
    if not os.path.exists(path):
        raise DataError(f"文件不存在: {path}")
    df = pd.read_csv(path, dtype={'session': str}, float_precision='round_trip')
    z_columns = [c for c in df.columns if c.startswith('z') and c[1:].isdigit()]
    if 'session' not in df.columns or 't' not in df.columns or not z_columns:
        raise DataError(f"{path}: 不是嵌入 CSV (需要 session, t, z0.. 列)")
    z_columns.sort(key=lambda c: int(c[1:]))
    reps = []
    for session, group in df.groupby('session', sort=False):
        t = group['t'].to_numpy(dtype=np.int64)
        reps.append(TimeSeriesRepresentation(group[z_columns].to_numpy(dtype=np.float64), session_id=str(session),
                                             offset=int(t[0]), sample_rate_hz=sample_rate_hz))
    return reps


def write_trajectory_csv(series: MultivariateTimeSeries, clusters: np.ndarray, offset: int, path: str) -> str | None:
    """带坐标的会话写出 (t, lat, lon, cluster, label)，供外部地图工具着色；无坐标时跳过。"""
    if series.coordinates is None:
        return None
    idx = np.arange(offset, offset + len(clusters)) - 1
    frame = pd.DataFrame({'t': idx + 1, 'lat': series.coordinates[idx, 0], 'lon': series.coordinates[idx, 1],
                          'cluster': clusters})
    frame['label'] = _optional_column(series.labels[idx] if series.labels is not None else None, len(idx))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame.to_csv(path, index=False)
    return path
