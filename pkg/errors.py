# 文件: errors.py
"""流水线统一异常。exit_code 由 main.py 转换为进程退出码。"""


class PipelineError(Exception):
    exit_code = 1


class ConfigError(PipelineError):
    """配置非法: 参数越界、窗口规格错误、重采样比例不是整数等。"""
    exit_code = 1


class DataError(PipelineError):
    """数据问题: 文件缺失/为空/行不齐、非数值单元格、序列过短、长度不匹配。"""
    exit_code = 2

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


class ShapeError(DataError):
    """张量/矩阵形状不匹配，同时报告两侧形状。"""

    def __init__(self, op: str, left_shape, right_shape):
        super().__init__(f"{op}: 形状不匹配 {tuple(left_shape)} vs {tuple(right_shape)}")
        self.op = op
        self.left_shape = tuple(left_shape)
        self.right_shape = tuple(right_shape)


class NumericalError(PipelineError):
    """数值失败: NaN/Inf 梯度或损失、精度矩阵非正定、TICC 聚类塌缩。"""
    exit_code = 3

    def __init__(self, message: str, smallest_eigenvalue: float | None = None):
        super().__init__(message)
        self.smallest_eigenvalue = smallest_eigenvalue


class StageError(PipelineError):
    """带阶段名的包装异常，退出码沿用被包装的异常。"""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"阶段 '{stage}' 失败: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, 'exit_code', 1)
