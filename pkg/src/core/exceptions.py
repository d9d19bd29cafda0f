"""
自定义异常类
提供更精确的异常类型，替代通用的 Exception
CLI 根据异常类型映射退出码
"""

from typing import Optional


class GroupReIDError(Exception):
    """基础异常类"""
    pass


class ConfigurationError(GroupReIDError):
    """配置错误（未知配置键、非法取值、P 不能整除 D 等）"""
    pass


class DataError(GroupReIDError):
    """数据错误基类"""
    pass


class DatasetFormatError(DataError):
    """特征文件格式错误，记录出错行号"""

    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class DimensionMismatchError(DataError):
    """向量/矩阵维度不一致"""
    pass


class DuplicatePersonError(DataError):
    """同一组内出现重复的 person_id"""
    pass


class GraphSizeError(DataError):
    """组成员数超过 n_max，或子图大小超过真实节点数"""
    pass


class EmptyInputError(DataError):
    """候选集 / 画廊 / 训练批次为空"""
    pass


class NumericalError(GroupReIDError):
    """数值错误（非有限值、零向量、梯度检查失败）"""
    pass


class CheckpointError(GroupReIDError):
    """检查点文件不可读或不兼容"""
    pass
