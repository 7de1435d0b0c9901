#!/usr/bin/env python3
"""
异常定义
所有业务异常都继承 Vec2InstanceError，命令行根据 error_class 输出错误类别
"""


class Vec2InstanceError(Exception):
    """业务异常基类"""

    @property
    def error_class(self) -> str:
        return type(self).__name__


class InvalidPolygon(Vec2InstanceError):
    """多边形顶点不足、坐标非有限值或顶点全部共线"""


class EmptyMask(Vec2InstanceError):
    """掩膜中没有前景像素"""


class InvalidTransform(Vec2InstanceError):
    """仿射变换不可逆"""


class ShapeMismatch(Vec2InstanceError):
    """数组形状或参数向量长度不匹配"""


class InvalidTarget(Vec2InstanceError):
    """加权损失的目标值不是二值"""


class InvalidWeights(Vec2InstanceError):
    """损失权重之和为零"""


class EmptyDataset(Vec2InstanceError):
    """训练集或测试集为空"""


class ConfigError(Vec2InstanceError):
    """配置错误：缺少检查点、参数越界、预算无法满足等"""


class TrainingError(Vec2InstanceError):
    """训练过程中出现 NaN 等数值异常"""


class InferenceError(Vec2InstanceError):
    """网络输出非有限值"""
