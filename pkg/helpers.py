# 文件: helpers.py

import hashlib
import json
import logging
import math
import os
import platform
from concurrent.futures import ThreadPoolExecutor
from logging.handlers import TimedRotatingFileHandler
from typing import Callable, Iterable, TypeVar

import numpy as np
import pandas as pd

from config import settings

T = TypeVar('T')
R = TypeVar('R')


class LogConfig:
    """日志配置类"""
    LOG_DIR = settings.LOG_DIR
    LOG_FILENAME = settings.LOG_FILENAME
    BACKUP_DAYS = 7
    LOG_LEVEL = getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO)

    @staticmethod
    def setup_logger(level: int | None = None):
        """静态方法，用于设置全局日志记录器。"""
        logger = logging.getLogger()
        logger.setLevel(level if level is not None else LogConfig.LOG_LEVEL)

        for handler in logger.handlers[:]:
            logger.removeHandler(handler)

        os.makedirs(LogConfig.LOG_DIR, exist_ok=True)

        file_handler = TimedRotatingFileHandler(
            os.path.join(LogConfig.LOG_DIR, LogConfig.LOG_FILENAME),
            when='midnight', interval=1, backupCount=LogConfig.BACKUP_DAYS, encoding='utf-8', delay=True
        )
        file_handler.setFormatter(logging.Formatter(
            '%(asctime)s [%(name)-20s] %(levelname)-8s: %(message)s', datefmt='%Y-%m-%d %H:%M:%S'
        ))

        console_handler = logging.StreamHandler()
        console_handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)-8s: %(message)s'))

        logger.addHandler(file_handler)
        logger.addHandler(console_handler)

        logging.getLogger('matplotlib').setLevel(logging.WARNING)
        logging.getLogger('PIL').setLevel(logging.WARNING)


def setup_logging(level: int | None = None):
    """顶层函数，用于调用LogConfig类中的日志设置方法。"""
    LogConfig.setup_logger(level)
    logging.info("==================================================")
    logging.info("日志系统已初始化")
    logging.info("==================================================")


def sanitize_data(data):
    """把 numpy / pandas 标量转换为可 JSON 序列化的原生类型，NaN/Inf 转为 None。"""
    if isinstance(data, dict): return {str(k): sanitize_data(v) for k, v in data.items()}
    if isinstance(data, (list, tuple)): return [sanitize_data(i) for i in data]
    if isinstance(data, np.ndarray): return sanitize_data(data.tolist())
    if isinstance(data, (float, np.floating)):
        if math.isinf(data) or math.isnan(data): return None
        return float(data)
    if isinstance(data, (bool, np.bool_)): return bool(data)
    if isinstance(data, np.integer): return int(data)
    if isinstance(data, pd.Timestamp): return data.isoformat()
    return data


def write_json(path: str, data) -> str:
    """确定性地写出 JSON (键排序、固定缩进)，同样的输入得到逐字节相同的文件。"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(sanitize_data(data), f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write('\n')
    return path


def read_json(path: str):
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def derive_seed(base: int, *keys) -> int:
    """由全局种子和若干键派生出稳定的子种子 (与进程、哈希随机化无关)。"""
    text = ':'.join([str(base)] + [str(k) for k in keys])
    return int.from_bytes(hashlib.sha256(text.encode('utf-8')).digest()[:4], 'little')


def run_parallel(fn: Callable[[T], R], items: Iterable[T], n_jobs: int = 1) -> list[R]:
    """按输入顺序返回结果；n_jobs <= 1 时顺序执行。"""
    items = list(items)
    if n_jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items))


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def library_versions() -> dict:
    """清单中记录的运行环境版本。"""
    import matplotlib
    import scipy
    import sklearn
    import statsmodels
    import torch
    return {
        'python': platform.python_version(),
        'numpy': np.__version__,
        'pandas': pd.__version__,
        'scipy': scipy.__version__,
        'torch': torch.__version__,
        'scikit-learn': sklearn.__version__,
        'statsmodels': statsmodels.__version__,
        'matplotlib': matplotlib.__version__,
    }
