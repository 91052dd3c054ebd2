# 文件: synthgen.py
"""
合成带标签的多通道"驾驶"会话: 在事件 (regime) 之间做马尔可夫跳转，每次停留时长均匀抽样，
停留期间按该事件的 VAR(1) 或独立高斯过程产生样本。用作端到端验收的真值来源。
"""

import logging
import math
import os

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy.linalg import solve_discrete_lyapunov

from errors import ConfigError, DataError
from helpers import derive_seed, read_json, run_parallel, write_json
from timeseries import MultivariateTimeSeries, export_csv

logger = logging.getLogger("SynthGen")

DRIVING_CHANNELS = (
    'brake_pressure_fl', 'brake_pressure_fr', 'motor_torque', 'accelerator_pedal', 'steering_angle',
    'velocity', 'long_accel', 'lat_accel', 'yaw_rate',
)


class RegimeSpec(BaseModel):
    """
    单个事件的生成过程。transition 给出时为 VAR(1): y_t = A·y_{t-1} + ε_t，ε ~ N(0, noise_scale²·I)
    (或 covariance)；否则为独立高斯 N(mean, covariance)。trend 为每秒的线性漂移，围绕停留中点居中。
    """
    model_config = ConfigDict(extra='forbid')

    label: int
    name: str = ''
    mean: list[float]
    covariance: list[list[float]] | None = None
    transition: list[list[float]] | None = None
    noise_scale: float = Field(1.0, ge=0)
    duration_range: tuple[float, float] = (4.0, 6.0)
    trend: list[float] | None = None

    @field_validator('duration_range')
    @classmethod
    def _check_durations(cls, v):
        lo, hi = v
        if lo <= 0 or hi < lo:
            raise ValueError(f"停留时长区间非法: {v}")
        return v

    @model_validator(mode='after')
    def _check_shapes(self):
        d = len(self.mean)
        if d == 0:
            raise ValueError("mean 不能为空")
        if self.covariance is not None:
            cov = np.asarray(self.covariance, dtype=np.float64)
            if cov.shape != (d, d) or not np.allclose(cov, cov.T):
                raise ValueError(f"covariance 必须是 {d}×{d} 对称矩阵")
            if np.linalg.eigvalsh(cov).min() < -1e-10:
                raise ValueError("covariance 不是半正定矩阵")
        if self.transition is not None:
            a = np.asarray(self.transition, dtype=np.float64)
            if a.shape != (d, d):
                raise ValueError(f"transition 必须是 {d}×{d} 矩阵")
            radius = float(np.max(np.abs(np.linalg.eigvals(a))))
            if radius >= 1.0:
                raise ValueError(f"VAR 过程不稳定: 谱半径 {radius:.4f} ≥ 1")
        if self.trend is not None and len(self.trend) != d:
            raise ValueError(f"trend 长度必须为 {d}")
        return self

    @property
    def d(self) -> int:
        return len(self.mean)

    def noise_covariance(self) -> np.ndarray:
        if self.covariance is not None:
            return np.asarray(self.covariance, dtype=np.float64)
        return (self.noise_scale ** 2) * np.eye(self.d)

    def stationary_covariance(self) -> np.ndarray:
        """平稳协方差: VAR(1) 时解离散 Lyapunov 方程 Σ = AΣAᵀ + Q，否则就是噪声协方差。"""
        q = self.noise_covariance()
        if self.transition is None:
            return q
        return solve_discrete_lyapunov(np.asarray(self.transition, dtype=np.float64), q)


def as_regime(spec: RegimeSpec | dict) -> RegimeSpec:
    if isinstance(spec, RegimeSpec):
        return spec
    try:
        return RegimeSpec.model_validate(spec)
    except ValidationError as e:
        raise ConfigError(f"事件配置非法: {e}") from e


def _matrix_root(cov: np.ndarray) -> np.ndarray:
    values, vectors = np.linalg.eigh(cov)
    return vectors * np.sqrt(np.clip(values, 0.0, None))


def _check_transition_matrix(matrix, k: int) -> np.ndarray:
    p = np.asarray(matrix, dtype=np.float64)
    if p.shape != (k, k):
        raise ConfigError(f"转移矩阵形状 {p.shape} 应为 ({k}, {k})")
    if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-9):
        raise ConfigError("转移矩阵必须非负且每行和为 1")
    if k >= 2 and np.any(np.diag(p) != 0):
        raise ConfigError("事件不能转移到自身 (转移矩阵对角线必须为 0)")
    return p


def uniform_transition(k: int) -> np.ndarray:
    """均匀跳转到其他任一事件；单事件时为 [[1]]。"""
    if k == 1:
        return np.ones((1, 1))
    return (np.ones((k, k)) - np.eye(k)) / (k - 1)


def _emit_visit(spec: RegimeSpec, length: int, rate_hz: float, rng: np.random.Generator) -> np.ndarray:
    d = spec.d
    mean = np.asarray(spec.mean, dtype=np.float64)
    noise = rng.standard_normal((length, d)) @ _matrix_root(spec.noise_covariance()).T
    if spec.transition is None:
        samples = noise
    else:
        a = np.asarray(spec.transition, dtype=np.float64)
        state = _matrix_root(spec.stationary_covariance()) @ rng.standard_normal(d)
        samples = np.empty((length, d))
        for i in range(length):
            state = a @ state + noise[i]
            samples[i] = state
    values = samples + mean
    if spec.trend is not None:
        centred = (np.arange(length) - (length - 1) / 2.0) / rate_hz
        values = values + centred[:, None] * np.asarray(spec.trend, dtype=np.float64)
    return values.T


def generate_session(regimes: list[RegimeSpec], transition=None, length_seconds: float = 600.0,
                     rate_hz: float = 10.0, seed: int = 42, channels=None,
                     session_id: str = 'synthetic') -> MultivariateTimeSeries:
    """
    采样事件马尔可夫链并逐次停留生成样本；同一种子得到完全相同的序列。
    会话长度固定为 round(length_seconds·rate_hz)，最后一次停留在会话末尾截断，可能短于该事件的最短停留时长。
    """
    if not regimes:
        raise ConfigError("至少需要一个事件")
    regimes = [as_regime(r) for r in regimes]
    d = regimes[0].d
    if any(r.d != d for r in regimes):
        raise ConfigError("所有事件的通道数必须一致")
    if rate_hz <= 0 or length_seconds <= 0:
        raise ConfigError(f"时长与采样率必须为正数: {length_seconds}s @ {rate_hz}Hz")
    k = len(regimes)
    p = _check_transition_matrix(uniform_transition(k) if transition is None else transition, k)
    n = int(round(length_seconds * rate_hz))
    if n < 1:
        raise ConfigError(f"会话长度不足一个采样点: {length_seconds}s @ {rate_hz}Hz")
    channels = tuple(channels) if channels is not None else tuple(f"ch{i}" for i in range(d))
    if len(channels) != d:
        raise ConfigError(f"通道名数量 {len(channels)} 与事件维度 {d} 不一致")

    rng = np.random.default_rng(seed)
    data = np.empty((d, n))
    labels = np.empty(n, dtype=np.int64)
    position, current = 0, int(rng.integers(k))
    visits = 0
    while position < n:
        spec = regimes[current]
        lo, hi = spec.duration_range
        steps = max(1, int(round(rng.uniform(lo, hi) * rate_hz)))
        steps = min(steps, n - position)
        data[:, position:position + steps] = _emit_visit(spec, steps, rate_hz, rng)
        labels[position:position + steps] = spec.label
        position += steps
        visits += 1
        current = int(rng.choice(k, p=p[current]))
    logger.debug(f"[{session_id}] 生成 {n} 步, {visits} 次事件停留")
    return MultivariateTimeSeries(channels=channels, data=data, sample_rate_hz=rate_hz, labels=labels,
                                  session_id=session_id)


# --- 基准 ---

class BenchmarkSpec(BaseModel):
    model_config = ConfigDict(extra='forbid')

    name: str
    channels: list[str]
    regimes: list[RegimeSpec]
    transition: list[list[float]] | None = None
    rate_hz: float = 10.0
    session_seconds: float = 600.0
    train_sessions: int = Field(3, ge=1)
    test_sessions: int = Field(1, ge=0)
    seed: int = 42

    def save_json(self, path: str) -> str:
        return write_json(path, self.model_dump(mode='json'))

    @classmethod
    def load_json(cls, path: str) -> 'BenchmarkSpec':
        if not os.path.exists(path):
            raise DataError(f"基准配置不存在: {path}")
        try:
            return cls.model_validate(read_json(path))
        except ValidationError as e:
            raise ConfigError(f"基准配置 {path} 非法: {e}") from e


DRIVING_BASELINE = [1.0, 1.0, 0.5, 0.3, 0.0, 8.0, 0.0, 0.0, 0.0]


def _rotation(r: float, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return r * np.array([[c, -s], [s, c]])


def _driving_regime(label: int, name: str, persistence: dict | None = None, rotations: tuple = (),
                    jitter: float = 0.2) -> RegimeSpec:
    """
    事件之间共享均值与平稳协方差 (单位阵)，只在 VAR 转移矩阵上不同。
    转移矩阵为按通道组缩放的正交块，噪声协方差取 I - AAᵀ，使平稳协方差恰为 I。
    """
    index = {c: i for i, c in enumerate(DRIVING_CHANNELS)}
    a = jitter * np.eye(len(DRIVING_CHANNELS))
    for channel, value in (persistence or {}).items():
        a[index[channel], index[channel]] = value
    for first, second, r, angle in rotations:
        pair = [index[first], index[second]]
        a[np.ix_(pair, pair)] = _rotation(r, angle)
    noise = np.eye(len(DRIVING_CHANNELS)) - a @ a.T
    noise = 0.5 * (noise + noise.T)
    return RegimeSpec(label=label, name=name, mean=list(DRIVING_BASELINE), covariance=noise.tolist(),
                      transition=a.tolist(), duration_range=(4.0, 6.0))


def drivelike5() -> BenchmarkSpec:
    """
    5 个事件 × 9 个通道: 静止、加速、减速、左转、右转。各事件的边缘均值和方差相同，
    区别只在于哪一组通道带有慢漂移或振荡: 静止时全部通道都是弱相关抖动，加速/减速时
    驱动组 (扭矩、踏板) 或制动组 (制动压力) 与速度、纵向加速度一起缓慢漂移，
    左转/右转时转向角与横向加速度以不同频率耦合振荡。
    """
    regimes = [
        _driving_regime(0, 'standstill'),
        _driving_regime(1, 'accelerate', {'motor_torque': 0.97, 'accelerator_pedal': 0.97,
                                          'velocity': 0.97, 'long_accel': 0.97}),
        _driving_regime(2, 'decelerate', {'brake_pressure_fl': 0.97, 'brake_pressure_fr': 0.97,
                                          'velocity': 0.97, 'long_accel': 0.97}),
        _driving_regime(3, 'turn_left', {'yaw_rate': 0.95},
                        rotations=(('steering_angle', 'lat_accel', 0.95, math.pi / 5),)),
        _driving_regime(4, 'turn_right', {'yaw_rate': -0.9},
                        rotations=(('steering_angle', 'lat_accel', 0.95, math.pi / 2),)),
    ]
    return BenchmarkSpec(name='drivelike-5', channels=list(DRIVING_CHANNELS), regimes=regimes,
                         transition=uniform_transition(len(regimes)).tolist())


BENCHMARKS = {'drivelike-5': drivelike5}


def benchmark_spec(name: str) -> BenchmarkSpec:
    if name in BENCHMARKS:
        return BENCHMARKS[name]()
    if os.path.exists(name):
        return BenchmarkSpec.load_json(name)
    raise ConfigError(f"未知的合成基准: {name} (可选: {sorted(BENCHMARKS)})")


def generate_benchmark(spec: BenchmarkSpec | str, n_jobs: int = 1):
    """返回 (训练会话列表, 测试会话列表)；每个会话的种子由基准种子派生。"""
    if isinstance(spec, str):
        spec = benchmark_spec(spec)
    plan = [('train', i) for i in range(spec.train_sessions)] + [('test', i) for i in range(spec.test_sessions)]

    def build(item):
        split, i = item
        return generate_session(spec.regimes, spec.transition, spec.session_seconds, spec.rate_hz,
                                seed=derive_seed(spec.seed, spec.name, split, i), channels=spec.channels,
                                session_id=f"{spec.name}-{split}-{i}")

    sessions = run_parallel(build, plan, n_jobs)
    train = sessions[:spec.train_sessions]
    test = sessions[spec.train_sessions:]
    logger.info(f"合成基准 {spec.name}: 训练 {len(train)} 个会话, 测试 {len(test)} 个会话, "
                f"每个 {spec.session_seconds:g}s @ {spec.rate_hz:g}Hz")
    return train, test


def write_benchmark(spec: BenchmarkSpec | str, out_dir: str, n_jobs: int = 1) -> dict:
    """写出各会话 CSV (含 label 列) 与基准配置 JSON。"""
    if isinstance(spec, str):
        spec = benchmark_spec(spec)
    train, test = generate_benchmark(spec, n_jobs)
    paths = {'train': [], 'test': []}
    for split, sessions in (('train', train), ('test', test)):
        for series in sessions:
            paths[split].append(export_csv(series, os.path.join(out_dir, f"{series.session_id}.csv")))
    paths['spec'] = spec.save_json(os.path.join(out_dir, f"{spec.name}.json"))
    return paths
