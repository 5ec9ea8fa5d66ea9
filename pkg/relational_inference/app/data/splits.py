# app/data/splits.py

"""
================================================================================
 训练 / 验证 / 测试划分 (app/data/splits.py)
================================================================================

- ratio: 按模拟划分，前 70% 模拟训练、随后 15% 验证、其余测试（比例可配）。
  各次模拟本身相互独立，按顺序切分即可。
- interpolation: 按时间步划分，把全部帧随机打乱后按比例切分，每份内部再按
  时间排序。
- extrapolation: 按时间步划分，前 70% 帧训练，接下来 15% 验证，最后 15% 测试。

份额大小为 round(总数 × 比例)，测试集取剩余部分，因此三份之和恒等于总数。
"""
from typing import Sequence, Tuple

import numpy as np

from app.data.dataset import TrajectoryDataset
from app.errors import ConfigError

SPLIT_NAMES = ("train", "valid", "test")


def split_sizes(total: int, ratios: Sequence[float]) -> Tuple[int, int, int]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"划分比例必须是三个和为 1 的非负数，收到 {tuple(ratios)}")
    n_train = int(round(total * ratios[0]))
    n_valid = min(int(round(total * ratios[1])), total - n_train)
    return n_train, n_valid, total - n_train - n_valid


def split_by_sims(ds: TrajectoryDataset, ratios: Sequence[float]) -> Tuple[TrajectoryDataset, ...]:
    n_train, n_valid, _ = split_sizes(ds.n_sims, ratios)
    bounds = [0, n_train, n_train + n_valid, ds.n_sims]
    return tuple(
        _tag(ds.subset_sims(np.arange(bounds[k], bounds[k + 1])), name) for k, name in enumerate(SPLIT_NAMES)
    )


def split_by_steps(
    ds: TrajectoryDataset, ratios: Sequence[float], mode: str, seed: int
) -> Tuple[TrajectoryDataset, ...]:
    n_train, n_valid, _ = split_sizes(ds.n_steps, ratios)
    if mode == "extrapolation":
        order = np.arange(ds.n_steps)
    elif mode == "interpolation":
        order = np.random.default_rng(seed).permutation(ds.n_steps)
    else:
        raise ConfigError(f"未知的按时间划分方式 '{mode}'")
    parts = (order[:n_train], order[n_train:n_train + n_valid], order[n_train + n_valid:])
    return tuple(ds.subset_steps(np.sort(idx), split=name) for idx, name in zip(parts, SPLIT_NAMES))


def split_dataset(ds: TrajectoryDataset, mode: str, ratios: Sequence[float], seed: int) -> Tuple[TrajectoryDataset, ...]:
    if mode == "ratio":
        return split_by_sims(ds, ratios)
    return split_by_steps(ds, ratios, mode, seed)


def _tag(ds: TrajectoryDataset, name: str) -> TrajectoryDataset:
    ds.split = name
    return ds
