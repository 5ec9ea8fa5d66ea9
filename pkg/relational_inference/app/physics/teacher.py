# app/physics/teacher.py

"""
================================================================================
 Teacher-student 数据生成 (app/physics/teacher.py)
================================================================================

用一个冻结的、随机初始化的物理诱导边网络库代替解析力，驱动与解析系统相同的
半隐式欧拉积分器。生成的数据完全落在模型族之内，因此真实边类型在某个标签
置换下是可以精确恢复的。

数据集的 kind 记为 "teacher"，特征布局为 position_velocity_mass。与解析系统一样
支持降采样和逐步重算的 n 近邻拓扑。
"""
import logging
from typing import List, Optional

import numpy as np

from app.data.dataset import TrajectoryDataset, build_features, concat_sims
from app.decoder import generative
from app.decoder.bank import DecoderKind, EdgeModelBank
from app.errors import ConfigError, DivergenceError
from app.graph.topology import InteractionGraph, knn_neighbors
from app.physics.kernels import DIVERGENCE_LIMIT
from app.physics.simulate import finite_difference_increments, sample_masses, sample_symmetric_types
from app.physics.systems import SystemKind

logger = logging.getLogger(__name__)


def teacher_bank(n_types: int, hidden: List[int], sigma2: float, seed: int, dims: int = 2) -> EdgeModelBank:
    """输入宽度 2(2d+1)、输出宽度 d 的随机物理诱导边网络库。"""
    widths = [2 * (2 * dims + 1), *hidden, dims]
    return EdgeModelBank.create(
        DecoderKind.PHYSICS_INDUCED, widths, n_types, sigma2, np.random.default_rng(seed), dims=dims
    )


def simulate_teacher(
    bank: EdgeModelBank,
    n_particles: int,
    steps: int,
    dt: float,
    seed: int,
    teacher_seed: Optional[int] = None,
    downsample: int = 1,
    n_neighbors: Optional[int] = None,
) -> TrajectoryDataset:
    """
    生成一次 teacher 驱动的模拟（边类型对称随机）。

    Args:
        bank (EdgeModelBank): 冻结的物理诱导边网络库。
        n_particles (int): 粒子数 N >= 2。
        steps (int): 保存的帧数 T。
        dt (float): 积分步长。
        seed (int): 随机种子。
        teacher_seed (int, optional): 生成 bank 所用的种子；记录在 system 中，评估时据此重建参考力。
        downsample (int): 每隔多少个积分步保存一帧，帧间隔为 dt × downsample。
        n_neighbors (int, optional): 每个积分步重算 n 近邻；为空表示全连接。
    """
    if bank.kind is not DecoderKind.PHYSICS_INDUCED:
        raise ConfigError("teacher 数据只能由 physics_induced 边网络库生成")
    if n_particles < 2:
        raise ConfigError("teacher 数据至少需要两个粒子")
    if downsample < 1:
        raise ConfigError(f"降采样因子必须为正，收到 {downsample}")
    if n_neighbors is not None and not 1 <= n_neighbors <= n_particles - 1:
        raise ConfigError(f"近邻数 {n_neighbors} 必须在 [1, {n_particles - 1}] 之间")
    d = bank.dims
    if bank.node_width != 2 * d + 1:
        raise ConfigError(f"teacher 边网络输入宽度应为 {2 * (2 * d + 1)}")
    rng = np.random.default_rng(seed)
    masses = sample_masses(rng, n_particles)
    pos = rng.standard_normal((n_particles, d))
    vel = rng.standard_normal((n_particles, d))
    types = sample_symmetric_types(rng, n_particles, bank.n_types)[None].astype(np.int64)
    m = masses[None]

    static_nb = InteractionGraph.all_pairs(n_particles, bank.n_types).neighbor_array()
    n_cols = static_nb.shape[-1] if n_neighbors is None else n_neighbors
    positions = np.zeros((steps + 1, n_particles, d))
    velocities = np.zeros((steps + 1, n_particles, d))
    frame_nb = np.zeros((steps + 1, n_particles, n_cols), dtype=np.int64)
    n_substeps = steps * downsample
    for step in range(n_substeps + 1):
        nb = static_nb if n_neighbors is None else knn_neighbors(pos[None, None], n_neighbors)[:, 0]
        if step % downsample == 0:
            f = step // downsample
            positions[f], velocities[f], frame_nb[f] = pos, vel, nb[0]
        if step == n_substeps:
            break
        feats = build_features("position_velocity_mass", pos[None, None], vel[None, None], m)
        outputs = generative.edge_outputs(bank, generative.edge_inputs(feats, nb))
        edge_types = np.take_along_axis(types, nb, axis=2)
        acc = generative.increments_for_types(bank, outputs, edge_types, feats, m)[0, 0]
        vel = vel + acc * dt
        pos = pos + vel * dt
        if not np.all(np.isfinite(pos)) or np.max(np.abs(pos)) > DIVERGENCE_LIMIT:
            raise DivergenceError(f"teacher 模拟 (seed={seed}) 在第 {step + 1} 个积分步发散")

    frame_dt = dt * downsample
    return TrajectoryDataset(
        kind=SystemKind.TEACHER.value,
        dt=frame_dt,
        positions=positions[None, :-1],
        velocities=velocities[None, :-1],
        masses=m,
        increments=finite_difference_increments(velocities, frame_dt)[None],
        edge_types=types.astype(np.int8),
        neighbors=None if n_neighbors is None else frame_nb[None, :-1],
        feature_layout="position_velocity_mass",
        seed=seed,
        system={
            "kind": SystemKind.TEACHER.value, "n_particles": n_particles, "n_types": bank.n_types, "dt": dt,
            "steps": steps, "downsample": downsample, "n_neighbors": n_neighbors,
            "hidden": list(bank.edge_spec.layer_widths[1:-1]),
            "activation": bank.edge_spec.activation.value, "teacher_seed": teacher_seed,
        },
    )


def simulate_teacher_batch(
    bank: EdgeModelBank, n_particles: int, steps: int, dt: float, n_sims: int, seed: int,
    teacher_seed: Optional[int] = None, downsample: int = 1, n_neighbors: Optional[int] = None,
) -> TrajectoryDataset:
    if n_sims < 1:
        raise ConfigError("模拟次数必须为正")
    sims = [
        simulate_teacher(bank, n_particles, steps, dt, seed + s, teacher_seed, downsample, n_neighbors)
        for s in range(n_sims)
    ]
    logger.info("已生成 %d 次 teacher 模拟 (N=%d, K=%d, T=%d)", n_sims, n_particles, bank.n_types, steps)
    out = concat_sims(sims)
    out.seed = seed
    return out
