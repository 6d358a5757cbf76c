"""
heightmap-eds 异常定义
库代码抛出这些异常，CLI 负责映射为退出码
"""


class PerceptionError(Exception):
    """所有项目异常的基类"""
    exit_code = 2


class ConfigError(PerceptionError):
    """配置文档非法（未知键、取值越界）"""


class DataValidationError(PerceptionError, ValueError):
    """输入数据违反前置条件"""


class ShapeError(DataValidationError):
    """张量/图像形状不匹配"""


class OutOfBoundsError(DataValidationError):
    """地形查询或轨迹超出地形范围"""


class EmptyInputError(DataValidationError):
    """空点云、全无效图像、空序列"""


class SplitLeakageError(PerceptionError):
    """测试集样本出现在训练批次中"""


class FormatError(PerceptionError):
    """二进制容器格式损坏或版本不符"""


class DivergenceError(PerceptionError, ArithmeticError):
    """训练过程中出现 NaN/Inf"""
    exit_code = 3


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGENCE = 3
