# app/physics/noise.py

"""
================================================================================
 测量噪声注入 (app/physics/noise.py)
================================================================================

在观测位置上叠加白噪声 r̃ = r + β·X，X ~ N(0, 1)，再由带噪位置用有限差分
重新计算速度和增量（与积分器一致）：

    ṽ^t = (r̃^t - r̃^{t-1}) / Δ,     ã^t = (ṽ^{t+1} - ṽ^t) / Δ

首帧和末帧缺少差分所需的邻居帧，因此结果比原数据集少两帧。

噪声水平定义为目标（状态增量）的平均相对变化：

    noise_level = mean_{t,i,k} |ã_{i,k}^t - a_{i,k}^t| / |a_{i,k}^t|

真实增量恰为零的分量不参与平均。
"""
from dataclasses import replace
from typing import Tuple

import numpy as np

from app.data.dataset import TrajectoryDataset
from app.errors import ConfigError


def inject_noise(dataset: TrajectoryDataset, beta: float, seed: int) -> Tuple[TrajectoryDataset, float]:
    """
    Args:
        dataset (TrajectoryDataset): 原始数据集。
        beta (float): 噪声幅度 β >= 0。
        seed (int): 随机种子。

    Returns:
        tuple: (带噪数据集, 噪声水平)。β = 0 时原样返回，噪声水平为 0。
    """
    if beta < 0:
        raise ConfigError(f"噪声幅度 β 必须非负，收到 {beta}")
    if beta == 0:
        return dataset, 0.0
    if dataset.n_steps < 3:
        raise ConfigError("注入噪声至少需要 3 帧")
    rng = np.random.default_rng(seed)
    dt = dataset.dt
    noisy = dataset.positions + beta * rng.standard_normal(dataset.positions.shape)
    vel = (noisy[:, 1:] - noisy[:, :-1]) / dt           # 对应帧 1..T-1
    acc = (vel[:, 1:] - vel[:, :-1]) / dt               # 对应帧 1..T-2

    keep = np.arange(1, dataset.n_steps - 1)
    reference = dataset.increments[:, keep]
    nonzero = reference != 0.0
    rel = np.abs(acc - reference)[nonzero] / np.abs(reference[nonzero])
    level = float(rel.mean()) if rel.size else 0.0

    out = replace(
        dataset.subset_steps(keep, split=dataset.split),
        positions=noisy[:, keep],
        velocities=vel[:, :-1],
        increments=acc,
    )
    return out, level
