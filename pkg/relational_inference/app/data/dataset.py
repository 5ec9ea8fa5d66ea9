# app/data/dataset.py

"""
================================================================================
 轨迹数据集 (app/data/dataset.py)
================================================================================

`TrajectoryDataset` 是模拟器、推断算法和评估指标之间传递数据的唯一容器。
数组形状约定（S = 模拟数，T = 帧数，N = 节点数，d = 空间维度）：

    positions    (S, T, N, d)   观测位置；VAR 序列把数值放在这里 (d = 1)
    velocities   (S, T, N, d)   观测速度；VAR 序列全为零
    masses       (S, N)         质量，恒为正
    increments   (S, T, N, d)   真实状态增量 ẍ_i^t
    edge_types   (S, N, N)      真实边类型 z(e_{i,j})，对角线与不存在的边为 -1；可缺省
    neighbors    (S, T, N, n)   逐帧邻居表（演化拓扑时存在）
    frame_index  (T,)           每一帧在原始模拟中的时间步编号

边的记号 e_{i,j} 表示 v_j 作用于 v_i，edge_types[s, i, j] 即该边的类型。
节点特征的拼接方式由 `feature_layout` 决定，见 `node_features`。
"""
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Optional

import numpy as np

from app.errors import ConfigError, DataError

FEATURE_LAYOUTS = ("position_velocity_mass", "position_velocity", "value")


@dataclass
class TrajectoryDataset:
    kind: str
    dt: float
    positions: np.ndarray
    velocities: np.ndarray
    masses: np.ndarray
    increments: np.ndarray
    edge_types: Optional[np.ndarray] = None
    neighbors: Optional[np.ndarray] = None
    frame_index: Optional[np.ndarray] = None
    feature_layout: str = "position_velocity_mass"
    seed: int = 0
    split: str = "all"
    system: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.feature_layout not in FEATURE_LAYOUTS:
            raise ConfigError(f"未知的节点特征布局 '{self.feature_layout}'")
        S, T, N, d = self.positions.shape
        for name in ("velocities", "increments"):
            if getattr(self, name).shape != (S, T, N, d):
                raise DataError(f"{name} 的形状 {getattr(self, name).shape} 与 positions {(S, T, N, d)} 不一致")
        if self.masses.shape != (S, N):
            raise DataError(f"masses 的形状应为 {(S, N)}，实际为 {self.masses.shape}")
        if np.any(self.masses <= 0):
            raise DataError("质量必须严格为正")
        if self.edge_types is not None and self.edge_types.shape != (S, N, N):
            raise DataError(f"edge_types 的形状应为 {(S, N, N)}，实际为 {self.edge_types.shape}")
        if self.neighbors is not None and self.neighbors.shape[:3] != (S, T, N):
            raise DataError(f"neighbors 的前三维应为 {(S, T, N)}，实际为 {self.neighbors.shape}")
        if self.frame_index is None:
            self.frame_index = np.arange(T, dtype=np.int64)

    @property
    def n_sims(self) -> int:
        return self.positions.shape[0]

    @property
    def n_steps(self) -> int:
        return self.positions.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[2]

    @property
    def dims(self) -> int:
        return self.positions.shape[3]

    @property
    def feature_width(self) -> int:
        d = self.dims
        return {"position_velocity_mass": 2 * d + 1, "position_velocity": 2 * d, "value": d}[self.feature_layout]

    def node_features(self) -> np.ndarray:
        """按 `feature_layout` 拼接的节点状态 x_i^t，形状 (S, T, N, F)。"""
        return build_features(self.feature_layout, self.positions, self.velocities, self.masses)

    def subset_sims(self, index) -> "TrajectoryDataset":
        index = np.asarray(index, dtype=np.int64)
        return replace(
            self,
            positions=self.positions[index],
            velocities=self.velocities[index],
            masses=self.masses[index],
            increments=self.increments[index],
            edge_types=None if self.edge_types is None else self.edge_types[index],
            neighbors=None if self.neighbors is None else self.neighbors[index],
        )

    def subset_steps(self, index, split: Optional[str] = None) -> "TrajectoryDataset":
        index = np.asarray(index, dtype=np.int64)
        return replace(
            self,
            positions=self.positions[:, index],
            velocities=self.velocities[:, index],
            increments=self.increments[:, index],
            neighbors=None if self.neighbors is None else self.neighbors[:, index],
            frame_index=self.frame_index[index],
            split=self.split if split is None else split,
        )

    def without_ground_truth(self) -> "TrajectoryDataset":
        return replace(self, edge_types=None)


def build_features(layout: str, positions: np.ndarray, velocities: np.ndarray, masses: np.ndarray) -> np.ndarray:
    if layout == "value":
        return positions.copy()
    if layout == "position_velocity":
        return np.concatenate([positions, velocities], axis=-1)
    m = np.broadcast_to(masses[:, None, :, None], positions.shape[:-1] + (1,))
    return np.concatenate([positions, velocities, m], axis=-1)


def concat_sims(datasets) -> TrajectoryDataset:
    first = datasets[0]
    stack = lambda name: None if getattr(first, name) is None else np.concatenate([getattr(d, name) for d in datasets])
    return replace(
        first,
        positions=stack("positions"),
        velocities=stack("velocities"),
        masses=stack("masses"),
        increments=stack("increments"),
        edge_types=stack("edge_types"),
        neighbors=stack("neighbors"),
    )
