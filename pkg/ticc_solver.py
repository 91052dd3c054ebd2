# 文件: ticc_solver.py
"""
TICC (Toeplitz 逆协方差聚类):
  - 把表示序列堆叠成 W 步的窗口向量 [z_t, …, z_{t+W-1}] ∈ R^{e·W}
  - M 步: 每个聚类的经验协方差 → 块 Toeplitz 约束下的图 Lasso (ADMM)
  - E 步: 每个点在各聚类下的负对数似然 → assign_dp 加切换惩罚 β
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from clustering import assign_dp, count_switches, kmeans_assign, kmeans_fit
from config import TiccParams
from errors import ConfigError, DataError, NumericalError, ShapeError
from helpers import derive_seed, run_parallel
from timeseries import TimeSeriesRepresentation

logger = logging.getLogger("TICC")

RESEED_POINTS = 20


def soft_threshold(x, threshold: float):
    """sign(x)·max(|x| - threshold, 0)"""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - threshold, 0.0)


def toeplitz_groups(block_size: int, n_blocks: int) -> np.ndarray:
    """
    块 Toeplitz 对称矩阵中必须相等的元素编组。子块 (r, c) 只取决于 c - r，且 (c, r) 块是 (r, c) 块的转置，
    所以元素 (r·e+a, c·e+b) 的规范键为 (|c-r|, a, b)，偏移为负时交换 a、b，偏移为零时取 (min, max)。
    """
    e = block_size
    n = e * n_blocks
    idx = np.arange(n)
    block, within = idx // e, idx % e
    r, c = np.meshgrid(block, block, indexing='ij')
    a, b = np.meshgrid(within, within, indexing='ij')
    delta = c - r
    first = np.where(delta < 0, b, a)
    second = np.where(delta < 0, a, b)
    diagonal = delta == 0
    first, second = np.where(diagonal, np.minimum(a, b), first), np.where(diagonal, np.maximum(a, b), second)
    key = (np.abs(delta) * e + first) * e + second
    _, groups = np.unique(key, return_inverse=True)
    return groups.reshape(n, n)


def project_toeplitz(matrix: np.ndarray, groups: np.ndarray) -> np.ndarray:
    """每组元素替换为组内均值。"""
    flat = groups.ravel()
    sums = np.bincount(flat, weights=matrix.ravel())
    counts = np.bincount(flat)
    return (sums / counts)[groups]


@dataclass
class AdmmResult:
    theta: np.ndarray
    iterations: int
    primal_residual: float
    dual_residual: float
    converged: bool


def solve_toeplitz_glasso(S, lam: float, block_size: int | None = None, rho: float = 1.0,
                          threshold: float = 2e-5, max_iter: int = 1000, n_samples: int | None = None) -> AdmmResult:
    """
    min_Θ  -log det Θ + tr(SΘ) + λ‖Θ‖₁   s.t. Θ 块 Toeplitz (块大小 block_size)。
    ADMM 以单位阵为初值；残差 max(‖Θ-Z‖_F, ρ‖Z-Z_prev‖_F) < threshold 时停止。
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError('toeplitz_glasso_admm', S.shape, (S.shape[0], S.shape[0]))
    scale = max(1.0, float(np.max(np.abs(S)))) if S.size else 1.0
    if not np.allclose(S, S.T, rtol=0.0, atol=1e-10 * scale):
        raise DataError("经验协方差矩阵不对称")
    if lam < 0:
        raise ConfigError(f"λ 必须 ≥ 0，当前 {lam}")
    if rho <= 0:
        raise ConfigError(f"ρ 必须为正数，当前 {rho}")
    n = S.shape[0]
    e = block_size or n
    if n % e:
        raise ShapeError('toeplitz_glasso_admm', S.shape, (e, e))
    if n_samples is not None and n_samples < n:
        logger.debug(f"样本数 {n_samples} 小于维数 {n}，经验协方差秩亏，依赖 λ 保证有界")

    groups = toeplitz_groups(e, n // e)
    Z = np.eye(n)
    U = np.zeros((n, n))
    primal = dual = math.inf
    converged = False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        d, Q = np.linalg.eigh(rho * (Z - U) - S)
        theta = (Q * ((d + np.sqrt(d * d + 4.0 * rho)) / (2.0 * rho))) @ Q.T
        Z_prev = Z
        Z = soft_threshold(project_toeplitz(theta + U, groups), lam / rho)
        U = U + theta - Z
        primal = float(np.linalg.norm(theta - Z))
        dual = float(rho * np.linalg.norm(Z - Z_prev))
        if max(primal, dual) < threshold:
            converged = True
            break
    if not converged:
        logger.warning(f"ADMM 达到迭代上限 {max_iter}: primal={primal:.3g}, dual={dual:.3g}")

    Z = 0.5 * (Z + Z.T)
    smallest = float(np.linalg.eigvalsh(Z).min())
    if smallest <= 0:
        raise NumericalError(f"精度矩阵非正定，最小特征值 {smallest:.3g}", smallest_eigenvalue=smallest)
    return AdmmResult(Z, iteration, primal, dual, converged)


def toeplitz_glasso_admm(S, lam: float, n_samples: int | None = None, rho: float = 1.0, threshold: float = 2e-5,
                         block_size: int | None = None, max_iter: int = 1000) -> np.ndarray:
    return solve_toeplitz_glasso(S, lam, block_size, rho, threshold, max_iter, n_samples).theta


def glasso_objective(S: np.ndarray, theta: np.ndarray, lam: float) -> float:
    """-log det Θ + tr(SΘ) + λ‖Θ‖₁；非正定时为 +inf。"""
    sign, logdet = np.linalg.slogdet(theta)
    if sign <= 0:
        return math.inf
    return float(np.sum(S * theta) - logdet + lam * np.abs(theta).sum())


def stack_windows(values: np.ndarray, window: int) -> np.ndarray:
    """(M, e) → (M-W+1, e·W)，第 t 行为 [z_t, …, z_{t+W-1}]。"""
    values = np.asarray(values, dtype=np.float64)
    m, e = values.shape
    if m < window:
        raise DataError(f"表示长度 {m} 小于 TICC 窗口 W={window}")
    view = sliding_window_view(values, window, axis=0)       # (M-W+1, e, W)
    return np.ascontiguousarray(view.transpose(0, 2, 1)).reshape(m - window + 1, window * e)


@dataclass
class TiccModel:
    means: np.ndarray              # (k, e·W)
    precisions: np.ndarray         # (k, e·W, e·W)
    window: int
    e: int
    lam: float
    beta: float
    objective_history: list = field(default_factory=list)
    iterations: int = 0

    @property
    def k(self) -> int:
        return self.means.shape[0]

    def cost_matrix(self, stacked: np.ndarray) -> np.ndarray:
        """(T, k) 代价: 负对数似然加上每个点分摊的 (λ/2)‖Θ_j‖₁。"""
        if stacked.shape[1] != self.means.shape[1]:
            raise ShapeError('ticc_costs', stacked.shape, self.means.shape)
        dim = stacked.shape[1]
        costs = np.empty((len(stacked), self.k))
        for j in range(self.k):
            diff = stacked - self.means[j]
            quad = np.einsum('ti,ti->t', diff @ self.precisions[j], diff)
            _, logdet = np.linalg.slogdet(self.precisions[j])
            costs[:, j] = 0.5 * quad - 0.5 * logdet + 0.5 * dim * math.log(2 * math.pi) \
                + 0.5 * self.lam * np.abs(self.precisions[j]).sum()
        return costs

    def assign(self, values: np.ndarray) -> np.ndarray:
        """对一个会话的表示做 E 步；尾部 W-1 个时间步沿用最后一个分配。"""
        path = assign_dp(self.cost_matrix(stack_windows(values, self.window)), self.beta)
        return extend_tail(path, len(values))

    def to_dict(self) -> dict:
        return {'algorithm': 'ticc', 'k': self.k, 'e': self.e, 'window': self.window, 'lam': self.lam,
                'beta': self.beta, 'means': self.means, 'precisions': self.precisions,
                'objective_history': self.objective_history, 'iterations': self.iterations}

    @classmethod
    def from_dict(cls, data: dict) -> 'TiccModel':
        return cls(np.asarray(data['means'], dtype=np.float64), np.asarray(data['precisions'], dtype=np.float64),
                   int(data['window']), int(data['e']), float(data['lam']), float(data['beta']),
                   list(data.get('objective_history', [])), int(data.get('iterations', 0)))


def extend_tail(path: np.ndarray, length: int) -> np.ndarray:
    if len(path) == 0:
        raise DataError("分配序列为空，无法补齐尾部")
    return np.concatenate([path, np.full(length - len(path), path[-1], dtype=np.int64)])


class TiccSolver:
    def __init__(self, params: TiccParams, k: int, seed: int = 42, n_jobs: int = 1):
        if k < 1:
            raise ConfigError(f"k 必须 ≥ 1，当前 {k}")
        self.params = params
        self.k = k
        self.seed = seed
        self.n_jobs = n_jobs
        self.logger = logging.getLogger(f"{self.__class__.__name__}[k={k}]")
        self.reseeded_at: list[int] = []

    def _stack(self, representations: list[np.ndarray]) -> list[np.ndarray]:
        stacked = []
        for i, values in enumerate(representations):
            if len(values) < self.params.window:
                raise DataError(f"第 {i} 个会话的表示长度 {len(values)} 小于 TICC 窗口 W={self.params.window}")
            stacked.append(stack_windows(values, self.params.window))
        return stacked

    def _m_step(self, x: np.ndarray, labels: np.ndarray, e: int, previous: np.ndarray | None = None):
        """
        每个聚类: 均值取样本均值，Θ_j 解块 Toeplitz 图 Lasso。聚类在目标中的项为
        (n_j/2)·[tr(S_jΘ_j) - log det Θ_j + λ‖Θ_j‖₁] + 常数，与 cost_matrix 的逐点分摊一致；
        新解没有降低该项时 (ADMM 未充分收敛) 保留上一轮的 Θ_j。
        """
        dim = x.shape[1]
        lam = self.params.lam

        def solve(j):
            members = x[labels == j]
            mean = members.mean(axis=0)
            cov = np.cov(members, rowvar=False, bias=True).reshape(dim, dim) if len(members) > 1 \
                else np.zeros((dim, dim))
            theta = toeplitz_glasso_admm(cov, lam, len(members), self.params.rho,
                                         self.params.threshold, block_size=e, max_iter=self.params.admm_max_iter)
            if previous is not None and glasso_objective(cov, previous[j], lam) <= glasso_objective(cov, theta, lam):
                self.logger.debug(f"聚类 {j}: 新的 Θ 未降低目标，保留上一轮的解")
                theta = previous[j]
            return mean, theta

        results = run_parallel(solve, range(self.k), self.n_jobs)
        return np.array([r[0] for r in results]), np.array([r[1] for r in results])

    def _reseed(self, labels: np.ndarray, costs: np.ndarray) -> np.ndarray:
        """空聚类用当前所属聚类下似然最低的点重新播种，并保证来源聚类不被抽空。"""
        sizes = np.bincount(labels, minlength=self.k)
        empty = np.flatnonzero(sizes == 0)
        if empty.size == 0:
            return labels
        labels = labels.copy()
        own_cost = costs[np.arange(len(labels)), labels]
        order = np.argsort(-own_cost, kind='stable')
        quota = max(1, min(RESEED_POINTS, len(labels) // (2 * self.k)))
        for j in empty:
            chosen = []
            for idx in order:
                src = labels[idx]
                if src != j and sizes[src] > quota:
                    chosen.append(idx)
                    sizes[src] -= 1
                    if len(chosen) == quota:
                        break
            labels[chosen] = j
            sizes[j] = len(chosen)
            self.logger.warning(f"聚类 {j} 为空，已用 {len(chosen)} 个低似然点重新播种")
        if np.count_nonzero(sizes) < self.k:
            raise NumericalError(f"TICC 聚类塌缩: 重新播种后各聚类大小 {sizes.tolist()}")
        return labels

    def objective(self, model: TiccModel, costs: np.ndarray, paths: list[np.ndarray], labels: np.ndarray) -> float:
        """
        Σ 负对数似然 + β·切换次数 + Σ_j (n_j/2)·λ‖Θ_j‖₁ (后者已分摊在代价里)。
        E 步是给定 Θ 的精确最小化，M 步不会使各聚类项变大，所以除重新播种的轮次外逐轮不增。
        """
        data_term = float(costs[np.arange(len(labels)), labels].sum())
        switches = sum(count_switches(p) for p in paths)
        return data_term + model.beta * switches

    def fit(self, representations: list) -> tuple[TiccModel, list[np.ndarray]]:
        values = [r.values if isinstance(r, TimeSeriesRepresentation) else np.asarray(r, dtype=np.float64)
                  for r in representations]
        if not values:
            raise DataError("TICC 需要至少一个会话")
        e = values[0].shape[1]
        if any(v.shape[1] != e for v in values):
            raise ShapeError('ticc_fit', values[0].shape, next(v.shape for v in values if v.shape[1] != e))
        p = self.params
        stacked = self._stack(values)
        x = np.vstack(stacked)
        if len(x) < self.k * p.window:
            raise DataError(f"堆叠样本数 {len(x)} 少于 k·W = {self.k * p.window}")
        bounds = np.cumsum([0] + [len(s) for s in stacked])

        init = kmeans_fit(x, self.k, restarts=1, seed=derive_seed(self.seed, 'ticc-init'))
        labels = kmeans_assign(init, x)
        if np.count_nonzero(np.bincount(labels, minlength=self.k)) < self.k:
            raise NumericalError(f"TICC 初始化后存在空聚类: {np.bincount(labels, minlength=self.k).tolist()}")

        model = TiccModel(np.zeros((self.k, x.shape[1])), np.array([np.eye(x.shape[1])] * self.k),
                          p.window, e, p.lam, p.beta)
        costs = None
        paths = []
        self.reseeded_at = []
        for iteration in range(1, p.max_iter + 1):
            previous = None
            if costs is not None:
                reseeded = self._reseed(labels, costs)
                if reseeded is not labels:
                    self.reseeded_at.append(iteration)
                labels = reseeded
                previous = model.precisions
            model.means, model.precisions = self._m_step(x, labels, e, previous)
            costs = model.cost_matrix(x)
            paths = run_parallel(lambda s: assign_dp(costs[bounds[s]:bounds[s + 1]], p.beta),
                                 range(len(stacked)), self.n_jobs)
            new_labels = np.concatenate(paths)
            value = self.objective(model, costs, paths, new_labels)
            model.objective_history.append(value)
            model.iterations = iteration
            sizes = np.bincount(new_labels, minlength=self.k).tolist()
            self.logger.info(f"第 {iteration}/{p.max_iter} 轮: 目标值 {value:.6f}, 聚类大小 {sizes}")
            unchanged = np.array_equal(new_labels, labels)
            labels = new_labels
            if unchanged:
                self.logger.info("分配不再变化，提前结束")
                break

        full = [extend_tail(path, len(v)) for path, v in zip(paths, values)]
        return model, full


def ticc_fit(representations: list, params: TiccParams | None = None, k: int = 13, seed: int = 42,
             n_jobs: int = 1) -> tuple[TiccModel, list[np.ndarray]]:
    return TiccSolver(params or TiccParams(), k, seed, n_jobs).fit(representations)
