# app/metrics/report.py

"""
评估报告模型。命令行写出的 report.json 与 `/evaluate` 的响应都是它。

发散的滚动预测在内存中为 +inf，写入报告时 `mae_state` 对应项为 null，
`diverged` 中该步长为 true。
"""
from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class EvaluationReport(BaseModel):
    """
    一次评估的全部指标。无法计算的指标为 null，原因写在 `null_reasons` 中。
    """
    method: str
    decoder: str
    dataset_kind: str
    n_sims: int
    n_steps: int
    n_edges: int = Field(..., description="参与评估的有向边数（每次模拟计一次）。")
    accuracy: Optional[float] = Field(None, description="标签置换不变的准确率。")
    permutation: Optional[List[int]] = Field(None, description="使准确率最大的置换，permutation[预测类型] = 真值类型。")
    disagreement_rate: Optional[float] = Field(None, description="e_ij 与 e_ji 推断类型不一致的节点对比例。")
    mae_ef: Optional[float] = None
    mae_symm: Optional[float] = None
    mae_increment: Optional[float] = Field(None, description="推断类型下预测增量（加速度）的平均绝对误差。")
    mae_state: Dict[str, Optional[float]] = Field(default_factory=dict, description="键为滚动步长 h。")
    rollout_starts: Dict[str, int] = Field(default_factory=dict)
    diverged: Dict[str, bool] = Field(default_factory=dict)
    null_reasons: Dict[str, str] = Field(default_factory=dict)
