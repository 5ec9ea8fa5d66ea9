# app/physics/systems.py

"""
================================================================================
 相互作用系统的定义 (app/physics/systems.py)
================================================================================

`ParticleSystemSpec` 描述一个异质粒子系统（弹簧、电荷、晶化），`VarSpec` 描述
一个向量自回归 (VAR) 序列。两者都是不可变值对象，并提供 `pairwise_force`
这一解析力接口供指标模块使用。

预设参数:
- 弹簧 K=2: (k, L) = (0.5, 2.0), (2.0, 1.0)
- 弹簧 K=4: 额外加上 (2.5, 1.0), (2.5, 2.0)
- 电荷: c = 1, δ = 0.01（δ 加在距离上：r <- r + δ）
- 晶化: σ_LJ = 0.3, ε_LJ = 1e-5, C = 0.02, dt = 1e-5，每 50 步降采样一次
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from app.errors import ConfigError, NumericError
from app.physics import kernels

SPRING_PARAMS_K2 = ((0.5, 2.0), (2.0, 1.0))
SPRING_PARAMS_K4 = SPRING_PARAMS_K2 + ((2.5, 1.0), (2.5, 2.0))


class SystemKind(str, Enum):
    SPRING = "spring"
    CHARGE = "charge"
    CRYSTALLIZATION = "crystallization"
    VAR = "var"
    TEACHER = "teacher"


_KERNEL_KIND = {
    SystemKind.SPRING: kernels.SPRING,
    SystemKind.CHARGE: kernels.CHARGE,
    SystemKind.CRYSTALLIZATION: kernels.CRYSTALLIZATION,
}


class GeometryError(NumericError):
    """弹簧系统中两个粒子重合，方向向量无定义。"""


@dataclass(frozen=True)
class ParticleSystemSpec:
    kind: SystemKind
    n_particles: int
    n_types: int
    dt: float = 0.01
    steps: int = 100
    downsample: int = 1
    dims: int = 2
    n_neighbors: Optional[int] = None
    spring_params: Tuple[Tuple[float, float], ...] = SPRING_PARAMS_K2
    charge_c: float = 1.0
    charge_delta: float = 0.01
    lj_sigma: float = 0.3
    lj_epsilon: float = 1e-5
    dipole_c: float = 0.02
    min_separation: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", SystemKind(self.kind))
        if self.kind not in _KERNEL_KIND:
            raise ConfigError(f"{self.kind.value} 不是解析粒子系统：VAR 序列请使用 VarSpec，teacher 数据请使用 app.physics.teacher")
        if self.n_particles < 1 or self.steps < 1 or self.downsample < 1:
            raise ConfigError("粒子数、步数和降采样因子必须为正")
        if self.dims != 2:
            raise ConfigError(f"只支持二维模拟，收到 d={self.dims}")
        if self.kind is SystemKind.SPRING and len(self.spring_params) != self.n_types:
            raise ConfigError(f"弹簧参数个数 {len(self.spring_params)} 与类型数 K={self.n_types} 不符")
        if self.kind in (SystemKind.CHARGE, SystemKind.CRYSTALLIZATION) and self.n_types != 2:
            raise ConfigError(f"{self.kind.value} 系统固定 K=2，收到 K={self.n_types}")
        if self.n_neighbors is not None and not 1 <= self.n_neighbors <= self.n_particles - 1:
            raise ConfigError(f"近邻数 {self.n_neighbors} 必须在 [1, N-1] 之间")

    @property
    def kernel_kind(self) -> int:
        return _KERNEL_KIND[self.kind]

    @property
    def feature_layout(self) -> str:
        # 晶化系统所有粒子质量相同，质量不作为输入特征
        if self.kind is SystemKind.CRYSTALLIZATION:
            return "position_velocity"
        return "position_velocity_mass"

    def type_params(self) -> np.ndarray:
        """每种相互作用类型一行的参数表，供 numba 内核使用。"""
        table = np.zeros((self.n_types, 3), dtype=np.float64)
        if self.kind is SystemKind.SPRING:
            for k, (stiffness, length) in enumerate(self.spring_params):
                table[k, 0], table[k, 1] = stiffness, length
        elif self.kind is SystemKind.CHARGE:
            # 类型 0: 异号相吸 (q_i q_j = -1)，类型 1: 同号相斥
            table[0] = (-self.charge_c, self.charge_delta, 0.0)
            table[1] = (self.charge_c, self.charge_delta, 0.0)
        else:
            # 类型 0: 同种粒子（偶极吸引），类型 1: 异种粒子（偶极排斥）
            table[0] = (self.lj_sigma, self.lj_epsilon, -self.dipole_c)
            table[1] = (self.lj_sigma, self.lj_epsilon, self.dipole_c)
        return table

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "n_particles": self.n_particles,
            "n_types": self.n_types,
            "dt": self.dt,
            "steps": self.steps,
            "downsample": self.downsample,
            "dims": self.dims,
            "n_neighbors": self.n_neighbors,
            "spring_params": [list(p) for p in self.spring_params],
            "charge_c": self.charge_c,
            "charge_delta": self.charge_delta,
            "lj_sigma": self.lj_sigma,
            "lj_epsilon": self.lj_epsilon,
            "dipole_c": self.dipole_c,
            "min_separation": self.min_separation,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ParticleSystemSpec":
        data = dict(data)
        data["spring_params"] = tuple(tuple(p) for p in data.get("spring_params", SPRING_PARAMS_K2))
        return cls(**data)


def pairwise_force(spec: ParticleSystemSpec, type_index: int, state_i, state_j) -> np.ndarray:
    """
    解析成对力：v_i 受到 v_j 的力。

    Args:
        spec (ParticleSystemSpec): 系统定义。
        type_index (int): 边类型 k。
        state_i, state_j: 节点状态，前 d 个分量为位置。

    Returns:
        np.ndarray: 长度为 d 的力向量。
    """
    if not 0 <= type_index < spec.n_types:
        raise ConfigError(f"边类型 {type_index} 超出 [0, {spec.n_types})")
    ri = np.asarray(state_i, dtype=np.float64)[: spec.dims]
    rj = np.asarray(state_j, dtype=np.float64)[: spec.dims]
    if spec.kind is SystemKind.SPRING and np.array_equal(ri, rj):
        raise GeometryError(f"弹簧两端粒子重合于 {ri.tolist()}，方向无定义")
    return kernels.pair_force(spec.kernel_kind, spec.type_params()[type_index], ri, rj)


def pairwise_forces(spec: ParticleSystemSpec, types: np.ndarray, ri: np.ndarray, rj: np.ndarray) -> np.ndarray:
    """`pairwise_force` 的批量版本，types/ri/rj 形状为 (...,) 和 (..., d)。"""
    shape = ri.shape
    out = kernels.pair_forces_batch(
        spec.kernel_kind,
        spec.type_params(),
        np.ascontiguousarray(types.reshape(-1), dtype=np.int64),
        np.ascontiguousarray(ri.reshape(-1, shape[-1]), dtype=np.float64),
        np.ascontiguousarray(rj.reshape(-1, shape[-1]), dtype=np.float64),
    )
    return out.reshape(shape)


@dataclass(frozen=True)
class VarSpec:
    """
    VAR(1) 序列 x^{t+1} = A x^t + 噪声，A = coefficients * adjacency。

    adjacency[i, j] 为 True 表示 x_j 影响 x_i（即边 e_{i,j} 存在）；对角线表示
    自依赖，允许出现，但不计入边类型真值。
    """

    adjacency: np.ndarray
    coefficients: np.ndarray
    noise_std: float = 0.1
    steps: int = 100
    dt: float = 1.0
    description: str = field(default="", compare=False)

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        coef = np.asarray(self.coefficients, dtype=np.float64)
        if coef.ndim == 0:
            coef = np.full(adj.shape, float(coef))
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1] or coef.shape != adj.shape:
            raise ConfigError(f"邻接矩阵 {adj.shape} 与系数矩阵 {coef.shape} 必须是同尺寸方阵")
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "coefficients", coef)

    @property
    def n_series(self) -> int:
        return self.adjacency.shape[0]

    def transition(self) -> np.ndarray:
        return np.where(self.adjacency, self.coefficients, 0.0)

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.transition()))))


def chain_var(n_series: int, coefficient: float = 0.5, noise_std: float = 0.1, steps: int = 100) -> VarSpec:
    """链式因果结构 1 -> 2 -> ... -> N，每个序列带自依赖。"""
    adj = np.eye(n_series, dtype=bool)
    for i in range(1, n_series):
        adj[i, i - 1] = True
    return VarSpec(adj, np.full((n_series, n_series), coefficient), noise_std, steps, description="chain")
