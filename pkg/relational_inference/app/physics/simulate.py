# app/physics/simulate.py

"""
================================================================================
 轨迹生成 (app/physics/simulate.py)
================================================================================

模块功能:
根据 `ParticleSystemSpec` 或 `VarSpec` 生成带真值的 `TrajectoryDataset`。

采样规则:
- 质量: ln(m_i) ~ U(-1, 1)；晶化系统质量恒为 1。
- 初始位置与速度: 各分量独立取自 N(0, 1)。设置了 `min_separation` 时对初始
  位置做拒绝采样，保证任意两粒子间距不小于该值。
- 弹簧: 每个无序粒子对均匀抽取一种类型，再对称化。
- 电荷: 每个粒子随机带 ±1 电荷，边类型由电荷乘积决定（0 吸引 / 1 排斥）。
- 晶化: 粒子随机分为两种，边类型由是否同种决定（0 同种 / 1 异种）。

增量定义:
每次模拟多积分一帧，存储的增量统一按 ẍ^t = (ṙ^{t+1} - ṙ^t) / Δ 计算，
Δ = dt × downsample。在半隐式欧拉积分下，未降采样时它就是 F/m。
"""
import logging
from typing import List

import numpy as np

from app.data.dataset import TrajectoryDataset, concat_sims
from app.errors import ConfigError, DivergenceError
from app.physics import kernels
from app.physics.systems import ParticleSystemSpec, SystemKind, VarSpec

logger = logging.getLogger(__name__)

MAX_SEPARATION_TRIES = 10_000


def sample_masses(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.exp(rng.uniform(-1.0, 1.0, size=n))


def sample_symmetric_types(rng: np.random.Generator, n: int, n_types: int) -> np.ndarray:
    """对每个无序对均匀抽取类型并对称化，对角线为 -1。"""
    upper = rng.integers(0, n_types, size=(n, n))
    types = np.triu(upper, 1)
    types = types + types.T
    np.fill_diagonal(types, -1)
    return types.astype(np.int8)


def _initial_positions(rng: np.random.Generator, spec: ParticleSystemSpec) -> np.ndarray:
    for _ in range(MAX_SEPARATION_TRIES):
        pos = rng.standard_normal((spec.n_particles, spec.dims))
        if spec.min_separation <= 0.0 or spec.n_particles < 2:
            return pos
        diff = pos[:, None, :] - pos[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() >= spec.min_separation:
            return pos
    raise ConfigError(
        f"在 {MAX_SEPARATION_TRIES} 次尝试内无法采样到最小间距为 {spec.min_separation} 的初始构型"
    )


def _edge_types(rng: np.random.Generator, spec: ParticleSystemSpec) -> np.ndarray:
    N = spec.n_particles
    if spec.kind is SystemKind.SPRING:
        return sample_symmetric_types(rng, N, spec.n_types)
    if spec.kind is SystemKind.CHARGE:
        label = rng.choice(np.array([-1.0, 1.0]), size=N)
    else:
        label = rng.integers(0, 2, size=N) * 2.0 - 1.0
    same = np.outer(label, label) > 0
    types = np.where(same, 1, 0) if spec.kind is SystemKind.CHARGE else np.where(same, 0, 1)
    np.fill_diagonal(types, -1)
    return types.astype(np.int8)


def finite_difference_increments(velocities: np.ndarray, dt: float) -> np.ndarray:
    """沿时间轴（倒数第三维）计算 (v^{t+1} - v^t) / dt。"""
    return (velocities[..., 1:, :, :] - velocities[..., :-1, :, :]) / dt


def simulate(spec: ParticleSystemSpec, seed: int) -> TrajectoryDataset:
    """
    生成一次模拟。

    Args:
        spec (ParticleSystemSpec): 系统定义，`steps` 为保存的帧数 T。
        seed (int): 随机种子。

    Returns:
        TrajectoryDataset: S = 1 的数据集。
    """
    rng = np.random.default_rng(seed)
    N = spec.n_particles
    if spec.kind is SystemKind.CRYSTALLIZATION:
        masses = np.ones(N)
    else:
        masses = sample_masses(rng, N)
    pos0 = _initial_positions(rng, spec)
    vel0 = rng.standard_normal((N, spec.dims))
    types = _edge_types(rng, spec)

    n_nb = 0 if spec.n_neighbors is None else spec.n_neighbors
    positions, velocities, neighbors, diverged = kernels.integrate(
        spec.kernel_kind, spec.type_params(), types, pos0, vel0, masses,
        spec.dt, spec.steps + 1, spec.downsample, n_nb,
    )
    if diverged >= 0:
        raise DivergenceError(f"模拟 (seed={seed}) 在第 {diverged} 个积分步发散：坐标超过 {kernels.DIVERGENCE_LIMIT:g}")

    frame_dt = spec.dt * spec.downsample
    increments = finite_difference_increments(velocities, frame_dt)
    return TrajectoryDataset(
        kind=spec.kind.value,
        dt=frame_dt,
        positions=positions[None, :-1],
        velocities=velocities[None, :-1],
        masses=masses[None],
        increments=increments[None],
        edge_types=types[None],
        neighbors=None if spec.n_neighbors is None else neighbors[None, :-1],
        feature_layout=spec.feature_layout,
        seed=seed,
        system=spec.to_dict(),
    )


def simulate_batch(spec: ParticleSystemSpec, n_sims: int, seed: int) -> TrajectoryDataset:
    """按 seed, seed+1, ... 依次生成 n_sims 次相互独立的模拟并拼接。"""
    if n_sims < 1:
        raise ConfigError("模拟次数必须为正")
    sims: List[TrajectoryDataset] = []
    for s in range(n_sims):
        sims.append(simulate(spec, seed + s))
    logger.info("已生成 %d 次 %s 模拟 (N=%d, T=%d)", n_sims, spec.kind.value, spec.n_particles, spec.steps)
    out = concat_sims(sims)
    out.seed = seed
    return out


def simulate_var(spec: VarSpec, seed: int, n_sims: int = 1) -> TrajectoryDataset:
    """
    生成 VAR 序列。节点状态即序列值，增量为一步差分 x^{t+1} - x^t。

    真值边类型: 非对角线上 adjacency 为 True 记为类型 1（存在因果），否则为 0。
    """
    rho = spec.spectral_radius()
    if rho > 1.0 + 1e-12:
        raise ConfigError(f"VAR 系数矩阵的谱半径 {rho:.6f} > 1，序列不平稳")
    rng = np.random.default_rng(seed)
    A = spec.transition()
    N, T = spec.n_series, spec.steps
    series = np.zeros((n_sims, T + 1, N))
    series[:, 0] = rng.standard_normal((n_sims, N))
    for t in range(T):
        noise = spec.noise_std * rng.standard_normal((n_sims, N)) if spec.noise_std > 0 else 0.0
        series[:, t + 1] = series[:, t] @ A.T + noise

    types = spec.adjacency.astype(np.int8).copy()
    np.fill_diagonal(types, -1)
    values = series[..., None]
    return TrajectoryDataset(
        kind=SystemKind.VAR.value,
        dt=spec.dt,
        positions=values[:, :-1],
        velocities=np.zeros_like(values[:, :-1]),
        masses=np.ones((n_sims, N)),
        increments=(values[:, 1:] - values[:, :-1]),
        edge_types=np.repeat(types[None], n_sims, axis=0),
        feature_layout="value",
        seed=seed,
        system={
            "kind": SystemKind.VAR.value,
            "adjacency": spec.adjacency.astype(int).tolist(),
            "coefficients": spec.coefficients.tolist(),
            "noise_std": spec.noise_std,
            "steps": spec.steps,
            "description": spec.description,
        },
    )
