# 文件: tests/conftest.py
import numpy as np
import pytest

from config import TrainingConfig
from timeseries import MultivariateTimeSeries


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='运行耗时的端到端验收测试')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='需要 --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_two_regime_series(n_per_regime=200, switches=4, d=2, shift=4.0, seed=0, session_id='two-regime'):
    """交替出现的两个高斯事件，标签 0/1。"""
    rng = np.random.default_rng(seed)
    blocks, labels = [], []
    for i in range(switches):
        label = i % 2
        blocks.append(rng.normal(loc=shift * label, scale=1.0, size=(d, n_per_regime)))
        labels.append(np.full(n_per_regime, label))
    return MultivariateTimeSeries(channels=tuple(f"ch{i}" for i in range(d)), data=np.hstack(blocks),
                                  sample_rate_hz=10.0, labels=np.concatenate(labels), session_id=session_id)


@pytest.fixture
def two_regime_series():
    return make_two_regime_series()


@pytest.fixture
def tiny_training():
    return TrainingConfig(epochs=2, tloss_steps=2, batch_size=8, hidden_channels=4, tloss_negatives=2,
                          log_every=1, seed=7)
