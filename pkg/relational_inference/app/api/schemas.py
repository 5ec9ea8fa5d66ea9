# app/api/schemas.py

"""
================================================================================
 API数据结构手册 (app/api/schemas.py)
================================================================================

致API使用者：

这个文件精确定义了发送给后端以及从后端接收的所有JSON对象的格式。命令行
写出的 report.json 与 manifest.json 使用的也是这里的模型，因此 HTTP 响应与
命令行产物逐字段一致。

主要的数据结构：
1. `SimulateRequest` / `SimulateResponse`: `/simulate` 端点的请求与响应。
2. `EvaluateRequest` / `EvaluationReport`: `/evaluate` 端点的请求与响应。
3. `Manifest`: 每次命令行运行写出的可复现清单。

`EvaluationReport` 定义在 app/metrics/report.py，这里重新导出。
"""
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field

from app.metrics.report import EvaluationReport

__all__ = [
    "SimulateRequest", "EvaluateRequest", "DatasetSummary", "SimulateResponse", "EvaluationReport", "Manifest",
]

# ==============================================================================
# 1. 请求体模型 (Request Body Models)
# ==============================================================================

class SimulateRequest(BaseModel):
    """
    发送到 `/simulate` 的对象。`config` 与 `preset` 二选一；两者都给出时以
    `config` 为准，`overrides` 随后生效。
    """
    seed: int = Field(..., description="随机种子（必填，不提供默认值）。")
    preset: Optional[str] = Field(None, description="预设名：spring / charge / crystallization / var / teacher。")
    config: Optional[Dict[str, Any]] = Field(None, description="完整的 ExperimentConfig JSON。")
    overrides: List[str] = Field(default_factory=list, description="形如 'dataset.n_sims=10' 的覆盖项。")


class EvaluateRequest(BaseModel):
    """发送到 `/evaluate` 的对象：服务器本地的检查点目录与数据集文件。"""
    checkpoint: str = Field(..., description="检查点目录路径。")
    dataset: str = Field(..., description="数据集文件路径。")
    horizons: Optional[List[int]] = Field(None, description="滚动预测步长，缺省取检查点配置中的 rollout_horizons。")

# ==============================================================================
# 2. 响应体模型 (Response Body Models)
# ==============================================================================

class DatasetSummary(BaseModel):
    split: str
    n_sims: int
    n_steps: int
    n_nodes: int
    dims: int
    feature_layout: str
    sha256: str = Field(..., description="数据集文件字节的 SHA-256。")


class SimulateResponse(BaseModel):
    kind: str
    seed: int
    splits: List[DatasetSummary]
    noise_level: Optional[float] = Field(None, description="注入噪声时的相对噪声水平，否则为 null。")


class Manifest(BaseModel):
    """命令行每次运行写出的清单；可直接作为 `--config` 重新运行。"""
    command: str
    seed: int
    config: Dict[str, Any]
    inputs: Dict[str, str] = Field(default_factory=dict, description="输入文件路径 -> SHA-256。")
    artifacts: Dict[str, str] = Field(default_factory=dict, description="产物文件名 -> SHA-256。")
