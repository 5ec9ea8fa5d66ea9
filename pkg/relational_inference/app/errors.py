# app/errors.py

"""
================================================================================
 异常体系 (app/errors.py)
================================================================================

本项目所有可预期的失败都以 `RelationalInferenceError` 的子类抛出。每个子类
携带一个 `exit_code`，命令行入口据此返回进程退出码，HTTP 层据此选择状态码：

- 0: 成功
- 2: 配置错误（参数非法、维度不匹配、超出容量上限等）
- 3: 数据错误（文件损坏、检查点与数据集不兼容等）
- 4: 数值错误（非有限梯度、后验塌缩、模拟发散等）
"""


class RelationalInferenceError(Exception):
    """所有领域异常的基类。"""

    exit_code = 1


class ConfigError(RelationalInferenceError):
    exit_code = 2


class ShapeError(ConfigError):
    """输入数组的维度与网络或图结构不符。"""


class CapacityError(ConfigError):
    """枚举规模（实现数、排列数、网格点数）超过上限。"""


class UnsupportedMetricError(ConfigError):
    """当前解码器类型无法计算所请求的指标。"""


class DataError(RelationalInferenceError):
    exit_code = 3


class CompatibilityError(DataError):
    """检查点与数据集的 K、维度或特征布局不一致。"""


class NumericError(RelationalInferenceError):
    exit_code = 4


class DegeneracyError(NumericError):
    """后验某一行全部为 -inf，或期望计数之和为零。"""


class DivergenceError(NumericError):
    """粒子模拟发散（坐标绝对值超过阈值）。"""
