# app/config.py

"""
================================================================================
 实验配置 (app/config.py)
================================================================================

模块功能:
一次实验的全部参数由一个 JSON 文件描述，结构即 `ExperimentConfig`：

    {
      "seed": 7,                                  必填，不提供默认随机种子
      "system":   {...},                          生成数据用的系统定义
      "dataset":  {...},                          模拟次数、划分方式、噪声
      "model":    {...},                          推断方法、解码器、σ²
      "training": {...},                          轮数、学习率、早停
      "var_cri":  {...},                          Var-CRI 的分组数与扫描次数
      "evolving": {...}                           Evolving-CRI 的近邻数
    }

命令行的 `--set training.epochs=20` 形式的覆盖项会写回同一结构并重新校验。
`default_config(kind)` 给出与超参数表一致的预设（弹簧、电荷、晶化），另有
VAR 与 teacher-student 两种预设。

命令行运行时写出的 manifest 文件也可以直接作为 `--config` 传入：其中的
"config" 字段就是完整配置。
"""
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from app.decoder.bank import DecoderKind
from app.errors import ConfigError
from app.graph.realizations import DEFAULT_REALIZATION_CAP
from app.nn.mlp import Activation
from app.physics.systems import (
    SPRING_PARAMS_K2,
    SPRING_PARAMS_K4,
    ParticleSystemSpec,
    SystemKind,
    VarSpec,
    chain_var,
)



class SystemConfig(BaseModel):
    kind: SystemKind = Field(..., description="spring / charge / crystallization / var / teacher")
    n_particles: int = Field(5, ge=1, description="粒子数或 VAR 序列数 N")
    n_types: int = Field(2, ge=1, description="相互作用类型数 K")
    dt: float = Field(0.01, gt=0)
    steps: int = Field(49, ge=1, description="每次模拟保存的帧数 T")
    downsample: int = Field(1, ge=1)
    n_neighbors: Optional[int] = Field(None, description="逐帧 n 近邻；为空表示全连接")
    spring_params: Optional[List[Tuple[float, float]]] = None
    min_separation: float = Field(0.0, ge=0)
    var_adjacency: Optional[List[List[int]]] = None
    var_coefficients: Optional[List[List[float]]] = None
    var_noise_std: float = Field(0.1, ge=0)
    teacher_hidden: List[int] = Field(default_factory=lambda: [32], description="teacher 边网络的隐藏层宽度")
    teacher_seed: int = 0

    def particle_spec(self) -> ParticleSystemSpec:
        if self.kind in (SystemKind.VAR, SystemKind.TEACHER):
            raise ConfigError(f"{self.kind.value} 不是解析粒子系统")
        params = self.spring_params
        if params is None:
            params = SPRING_PARAMS_K4 if self.n_types == 4 else SPRING_PARAMS_K2
        return ParticleSystemSpec(
            kind=self.kind,
            n_particles=self.n_particles,
            n_types=self.n_types,
            dt=self.dt,
            steps=self.steps,
            downsample=self.downsample,
            n_neighbors=self.n_neighbors,
            spring_params=tuple(tuple(p) for p in params),
            min_separation=self.min_separation,
        )

    def var_spec(self) -> VarSpec:
        if self.kind is not SystemKind.VAR:
            raise ConfigError(f"{self.kind.value} 不是 VAR 系统")
        if self.var_adjacency is None:
            return chain_var(self.n_particles, noise_std=self.var_noise_std, steps=self.steps)
        coef = 0.5 if self.var_coefficients is None else np.asarray(self.var_coefficients, dtype=np.float64)
        return VarSpec(np.asarray(self.var_adjacency, dtype=bool), coef, self.var_noise_std, self.steps, self.dt)


class DatasetConfig(BaseModel):
    n_sims: int = Field(100, ge=1)
    split: Literal["ratio", "interpolation", "extrapolation"] = "ratio"
    ratios: Tuple[float, float, float] = (0.7, 0.15, 0.15)
    noise_beta: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _ratios_sum_to_one(self):
        if any(r < 0 for r in self.ratios) or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"划分比例必须非负且和为 1，收到 {self.ratios}")
        return self


class ModelConfig(BaseModel):
    method: Literal["cri", "var-cri", "evolving-cri"] = "cri"
    decoder: DecoderKind = DecoderKind.PHYSICS_INDUCED
    edge_widths: List[int] = Field(default_factory=lambda: [10, 256, 256, 2])
    node_hidden: int = Field(256, ge=1)
    activation: Activation = Activation.TANH
    sigma2: float = Field(0.1, gt=0)
    realization_cap: int = Field(DEFAULT_REALIZATION_CAP, ge=1)


class TrainingConfig(BaseModel):
    epochs: int = Field(500, ge=0)
    learning_rate: float = Field(0.001, gt=0)
    batch_steps: Optional[int] = Field(None, ge=1, description="M 步时间步小批量大小；为空时全批量")
    validate_every: int = Field(10, ge=1)
    patience: int = Field(50, ge=1, description="验证误差连续多少轮未改善即提前停止")
    max_halvings: int = Field(10, ge=0)
    max_rows: int = Field(1 << 16, ge=1, description="批量计算时每块的最大边数")


class VarCriConfig(BaseModel):
    n_groups: int = Field(2, ge=1)
    sweeps: int = Field(3, ge=1)
    tol: float = Field(1e-6, gt=0)


class EvolvingConfig(BaseModel):
    n_neighbors: Optional[int] = Field(None, ge=1, description="与数据集不同时按位置重算近邻（截断半径扫描）")


class ExperimentConfig(BaseModel):
    seed: int
    system: SystemConfig
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    var_cri: VarCriConfig = Field(default_factory=VarCriConfig)
    evolving: EvolvingConfig = Field(default_factory=EvolvingConfig)
    rollout_horizons: List[int] = Field(default_factory=lambda: [1, 10])

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2)


_PRESETS: Dict[str, Dict[str, Any]] = {
    "spring": {
        "system": {"kind": "spring", "n_particles": 5, "n_types": 2, "dt": 0.01, "steps": 49},
        "model": {"edge_widths": [10, 256, 256, 2], "sigma2": 0.1},
    },
    "charge": {
        "system": {"kind": "charge", "n_particles": 5, "n_types": 2, "dt": 0.01, "steps": 49},
        "model": {"edge_widths": [10, 256, 256, 256, 256, 2], "sigma2": 0.05},
    },
    "crystallization": {
        "system": {
            "kind": "crystallization", "n_particles": 100, "n_types": 2, "dt": 1e-5,
            "steps": 10000, "downsample": 50, "n_neighbors": 5, "min_separation": 0.1,
        },
        "dataset": {"n_sims": 1, "split": "interpolation"},
        "model": {"method": "evolving-cri", "edge_widths": [8, 300, 300, 300, 300, 2], "sigma2": 0.001},
    },
    "var": {
        "system": {"kind": "var", "n_particles": 3, "n_types": 2, "dt": 1.0, "steps": 49},
        "model": {"decoder": "message_passing", "edge_widths": [2, 64, 64], "node_hidden": 64, "sigma2": 0.01},
    },
    "teacher": {
        "system": {"kind": "teacher", "n_particles": 5, "n_types": 2, "dt": 0.01, "steps": 50},
        "model": {"edge_widths": [10, 64, 64, 2], "sigma2": 0.1},
        "training": {"epochs": 200},
    },
}


def default_config(kind: str, seed: int = 0) -> ExperimentConfig:
    if kind not in _PRESETS:
        raise ConfigError(f"没有名为 '{kind}' 的预设，可选 {sorted(_PRESETS)}")
    return validate_config({"seed": seed, **json.loads(json.dumps(_PRESETS[kind]))})


def validate_config(data: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"配置校验失败: {exc}") from exc


def load_config(path: Path) -> ExperimentConfig:
    """读取配置文件；若文件是 manifest，则取其中的 "config" 字段。"""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"无法读取配置文件 {path}: {exc}") from exc
    if isinstance(data, dict) and "config" in data and "command" in data:
        data = data["config"]
    return validate_config(data)


def apply_overrides(config: ExperimentConfig, overrides: Sequence[str]) -> ExperimentConfig:
    """
    Args:
        overrides: 形如 "training.epochs=20" 的字符串；值先按 JSON 解析，失败则视为字符串。
    """
    data = config.model_dump(mode="json")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"覆盖项 '{item}' 应为 key.path=value 形式")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"覆盖项 '{key}' 指向不存在的配置段 '{part}'")
            node = node[part]
        node[parts[-1]] = value
    return validate_config(data)
