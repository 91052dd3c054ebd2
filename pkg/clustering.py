# 文件: clustering.py
"""
时间戳级表示的聚类: k-means (多次随机重启)、带切换惩罚的动态规划分配，以及聚类结果的读写。
TICC 在 ticc_solver.py 中实现，复用这里的 assign_dp。
"""

import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist
from sklearn.cluster import KMeans

from errors import ConfigError, DataError, ShapeError
from helpers import derive_seed, read_json, run_parallel, write_json
from timeseries import TimeSeriesRepresentation

logger = logging.getLogger("Clustering")


@dataclass
class KMeansModel:
    centroids: np.ndarray            # (k, e)
    inertia: float
    restart_inertias: list = field(default_factory=list)
    n_iter: int = 0

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise DataError(f"质心矩阵形状非法: {self.centroids.shape}")
        if not np.all(np.isfinite(self.centroids)):
            raise DataError("质心中存在非有限值")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def e(self) -> int:
        return self.centroids.shape[1]

    def to_dict(self) -> dict:
        return {'algorithm': 'kmeans', 'k': self.k, 'e': self.e, 'centroids': self.centroids,
                'inertia': self.inertia, 'restart_inertias': self.restart_inertias, 'n_iter': self.n_iter}

    @classmethod
    def from_dict(cls, data: dict) -> 'KMeansModel':
        return cls(np.asarray(data['centroids'], dtype=np.float64), float(data['inertia']),
                   list(data.get('restart_inertias', [])), int(data.get('n_iter', 0)))


@dataclass
class ClusterAssignmentSequence:
    """单个会话的聚类序列；第 i 个元素对应原序列时间步 offset + i。"""
    session_id: str
    clusters: np.ndarray
    offset: int = 1

    def __post_init__(self):
        self.clusters = np.asarray(self.clusters, dtype=np.int64)
        if self.clusters.ndim != 1:
            raise DataError(f"[{self.session_id}] 聚类序列必须是一维的")

    def __len__(self):
        return len(self.clusters)

    @property
    def timesteps(self) -> np.ndarray:
        return np.arange(self.offset, self.offset + len(self.clusters))


def _stack_points(points) -> np.ndarray:
    if isinstance(points, TimeSeriesRepresentation):
        return points.values
    if isinstance(points, (list, tuple)) and points and isinstance(points[0], TimeSeriesRepresentation):
        return np.vstack([r.values for r in points])
    array = np.asarray(points, dtype=np.float64)
    if array.ndim != 2:
        raise ShapeError('kmeans', array.shape, (None, None))
    return array


def squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    if points.shape[1] != centroids.shape[1]:
        raise ShapeError('kmeans_assign', points.shape, centroids.shape)
    return cdist(points, centroids, metric='sqeuclidean')


def _inertia(points: np.ndarray, centroids: np.ndarray) -> float:
    return float(squared_distances(points, centroids).min(axis=1).sum())


def kmeans_fit(points, k: int, restarts: int = 15, seed: int = 42, max_iter: int = 300,
               n_jobs: int = 1) -> KMeansModel:
    """
    每次重启: k-means++ 初始化 + Lloyd 迭代，直到分配不再变化或达到 max_iter。
    返回惯性最小的一次重启；惯性按最终质心重新计算。
    """
    x = _stack_points(points)
    if k < 1:
        raise ConfigError(f"k 必须 ≥ 1，当前 {k}")
    if restarts < 1:
        raise ConfigError(f"重启次数必须 ≥ 1，当前 {restarts}")
    distinct = len(np.unique(x, axis=0))
    if distinct < k:
        raise DataError(f"不同的数据点只有 {distinct} 个，少于聚类数 k={k}")

    def one_restart(r: int):
        km = KMeans(n_clusters=k, init='k-means++', n_init=1, max_iter=max_iter, tol=0.0,
                    algorithm='lloyd', random_state=derive_seed(seed, 'kmeans', r))
        km.fit(x)
        centroids = km.cluster_centers_.astype(np.float64)
        return centroids, _inertia(x, centroids), int(km.n_iter_)

    results = run_parallel(one_restart, range(restarts), n_jobs)
    inertias = [r[1] for r in results]
    best = int(np.argmin(inertias))
    centroids, inertia, n_iter = results[best]
    logger.info(f"k-means: k={k}, {restarts} 次重启, 最优重启 #{best} 惯性 {inertia:.6g} (迭代 {n_iter} 次)")
    return KMeansModel(centroids, inertia, inertias, n_iter)


def kmeans_assign(model: KMeansModel, points) -> np.ndarray:
    """最近质心；距离相同时取编号最小的质心。"""
    x = _stack_points(points)
    return np.argmin(squared_distances(x, model.centroids), axis=1).astype(np.int64)


def assign_dp(costs, beta: float) -> np.ndarray:
    """
    最小化 Σ_t cost(t, P_t) + β·Σ_t 1[P_t ≠ P_{t+1}] 的分配序列 (Viterbi 式动态规划, O(T·k²))。
    回溯时并列取编号较小的聚类。
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2:
        raise ShapeError('assign_dp', costs.shape, (None, None))
    if beta < 0:
        raise ConfigError(f"切换惩罚 β 必须 ≥ 0，当前 {beta}")
    if not np.all(np.isfinite(costs)):
        raise DataError("代价矩阵中存在非有限值")
    n_steps, k = costs.shape
    path = np.zeros(n_steps, dtype=np.int64)
    if n_steps == 0:
        return path
    switch = beta * (1.0 - np.eye(k))
    columns = np.arange(k)
    back = np.zeros((n_steps, k), dtype=np.int64)
    acc = costs[0].copy()
    for t in range(1, n_steps):
        trans = acc[:, None] + switch            # trans[i, j]: 上一步 i → 本步 j
        back[t] = np.argmin(trans, axis=0)
        acc = trans[back[t], columns] + costs[t]
    path[-1] = int(np.argmin(acc))
    for t in range(n_steps - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def random_assign(lengths: list[int], k: int, seed: int) -> list[np.ndarray]:
    """随机基线: 每个时间步独立均匀地取一个聚类。"""
    rng = np.random.default_rng(derive_seed(seed, 'random-assign'))
    return [rng.integers(0, k, size=n).astype(np.int64) for n in lengths]


def count_switches(clusters: np.ndarray) -> int:
    clusters = np.asarray(clusters)
    return int(np.count_nonzero(clusters[1:] != clusters[:-1])) if len(clusters) > 1 else 0


# --- 导入导出 ---

def export_cluster_model(model, path: str) -> str:
    """KMeansModel 或 TiccModel 写为 JSON (矩阵为按行展开的稠密数组)。"""
    write_json(path, model.to_dict())
    logger.info(f"聚类模型已写出: {path}")
    return path


def load_cluster_model(path: str):
    data = read_json(path)
    algorithm = data.get('algorithm')
    if algorithm == 'kmeans':
        return KMeansModel.from_dict(data)
    if algorithm == 'ticc':
        from ticc_solver import TiccModel
        return TiccModel.from_dict(data)
    raise DataError(f"{path}: 未知的聚类模型类型 {algorithm!r}")


def write_assignments_csv(sequences: list[ClusterAssignmentSequence], path: str) -> str:
    frames = [pd.DataFrame({'session_id': s.session_id, 't': s.timesteps, 'cluster': s.clusters})
              for s in sequences]
    df = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=['session_id', 't', 'cluster'])
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    df.to_csv(path, index=False)
    return path


def read_assignments_csv(path: str) -> list[ClusterAssignmentSequence]:
    if not os.path.exists(path):
        raise DataError(f"文件不存在: {path}")
    df = pd.read_csv(path, dtype={'session_id': str})
    missing = {'session_id', 't', 'cluster'} - set(df.columns)
    if missing:
        raise DataError(f"{path}: 缺少列 {sorted(missing)}")
    sequences = []
    for session_id, group in df.groupby('session_id', sort=False):
        t = group['t'].to_numpy(dtype=np.int64)
        if len(t) > 1 and np.any(np.diff(t) != 1):
            raise DataError(f"{path}: 会话 {session_id} 的时间步不连续")
        sequences.append(ClusterAssignmentSequence(str(session_id), group['cluster'].to_numpy(dtype=np.int64),
                                                   offset=int(t[0])))
    return sequences
