# app/graph/topology.py

"""
================================================================================
 相互作用图 (app/graph/topology.py)
================================================================================

`InteractionGraph` 记录每次模拟中每个接收节点的入边邻居：

- 静态图: 每个 (s, i) 一个按下标升序排列的邻居表 Γ(i)。
- 演化图: 额外保存逐帧邻居表 Γ^t(i)，形状 (S, T, N, n)；静态邻居表取并集
  Γ(i) = ∪_t Γ^t(i)，构造时一次性算好。

边 e_{i,j} 的稠密编号按 (s, i, j) 字典序分配，见 `edge_list`。
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.data.dataset import TrajectoryDataset
from app.errors import ConfigError, DataError
from app.physics import kernels


@dataclass
class InteractionGraph:
    n_nodes: int
    n_types: int
    union: List[List[np.ndarray]]
    step_neighbors: Optional[np.ndarray] = None
    _edge_ids: Dict[Tuple[int, int, int], int] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        for s, rows in enumerate(self.union):
            if len(rows) != self.n_nodes:
                raise DataError(f"模拟 {s} 的邻居表行数 {len(rows)} 与节点数 {self.n_nodes} 不符")
            for i, nb in enumerate(rows):
                if np.any(nb == i):
                    raise DataError(f"模拟 {s} 中节点 {i} 出现自环")

    @property
    def n_sims(self) -> int:
        return len(self.union)

    @property
    def evolving(self) -> bool:
        return self.step_neighbors is not None

    @classmethod
    def all_pairs(cls, n_nodes: int, n_types: int, n_sims: int = 1) -> "InteractionGraph":
        rows = [np.array([j for j in range(n_nodes) if j != i], dtype=np.int64) for i in range(n_nodes)]
        return cls(n_nodes, n_types, [list(rows) for _ in range(n_sims)])

    @classmethod
    def from_adjacency(cls, adjacency: np.ndarray, n_types: int) -> "InteractionGraph":
        """adjacency[s, i, j] 为 True 表示 e_{i,j} 存在。"""
        adj = np.asarray(adjacency, dtype=bool)
        if adj.ndim == 2:
            adj = adj[None]
        union = [
            [np.flatnonzero(adj[s, i] & (np.arange(adj.shape[2]) != i)).astype(np.int64) for i in range(adj.shape[1])]
            for s in range(adj.shape[0])
        ]
        return cls(adj.shape[1], n_types, union)

    @classmethod
    def from_step_neighbors(cls, step_neighbors: np.ndarray, n_types: int) -> "InteractionGraph":
        step_neighbors = np.asarray(step_neighbors, dtype=np.int64)
        S, T, N, _ = step_neighbors.shape
        union = [[np.unique(step_neighbors[s, :, i]) for i in range(N)] for s in range(S)]
        return cls(N, n_types, union, step_neighbors=step_neighbors)

    @classmethod
    def from_dataset(cls, dataset: TrajectoryDataset, n_types: int, n_neighbors: Optional[int] = None) -> "InteractionGraph":
        """
        数据集自带逐帧邻居表时构造演化图，否则构造全连接图。

        n_neighbors 与数据集中的邻居数不同时，按存储的位置重新计算 n 近邻
        （用于截断半径扫描）。
        """
        if n_neighbors is not None:
            stored = None if dataset.neighbors is None else dataset.neighbors.shape[-1]
            if stored != n_neighbors:
                return cls.from_step_neighbors(knn_neighbors(dataset.positions, n_neighbors), n_types)
        if dataset.neighbors is not None:
            return cls.from_step_neighbors(dataset.neighbors, n_types)
        return cls.all_pairs(dataset.n_nodes, n_types, dataset.n_sims)

    def neighbors_of(self, s: int, i: int) -> np.ndarray:
        return self.union[s][i]

    def uniform_degree(self) -> int:
        degrees = {len(nb) for rows in self.union for nb in rows}
        if len(degrees) != 1:
            raise ConfigError(f"各接收节点的入边数不一致 {sorted(degrees)}，请使用 evolving-cri")
        return degrees.pop()

    def neighbor_array(self) -> np.ndarray:
        """静态邻居表 (S, N, n)，要求所有节点入边数相同。"""
        n = self.uniform_degree()
        out = np.empty((self.n_sims, self.n_nodes, n), dtype=np.int64)
        for s, rows in enumerate(self.union):
            for i, nb in enumerate(rows):
                out[s, i] = nb
        return out

    def step_neighbor_array(self, n_steps: int) -> np.ndarray:
        """逐帧邻居表 (S, T, N, n)；静态图沿时间轴广播（只读视图）。"""
        if self.step_neighbors is not None:
            if self.step_neighbors.shape[1] != n_steps:
                raise DataError(f"邻居表帧数 {self.step_neighbors.shape[1]} 与数据帧数 {n_steps} 不符")
            return self.step_neighbors
        nb = self.neighbor_array()
        return np.broadcast_to(nb[:, None], (nb.shape[0], n_steps) + nb.shape[1:])

    def edge_list(self) -> np.ndarray:
        """所有有向边 (s, i, j)，形状 (E, 3)，按字典序排列。"""
        rows = [(s, i, int(j)) for s, nbs in enumerate(self.union) for i, nb in enumerate(nbs) for j in nb]
        return np.array(rows, dtype=np.int64).reshape(-1, 3)

    def edge_id(self, s: int, i: int, j: int) -> int:
        if self._edge_ids is None:
            self._edge_ids = {tuple(e): k for k, e in enumerate(self.edge_list().tolist())}
        try:
            return self._edge_ids[(s, i, j)]
        except KeyError:
            raise DataError(f"边 e_({i},{j}) 不在模拟 {s} 的图中") from None


def knn_neighbors(positions: np.ndarray, n_neighbors: int) -> np.ndarray:
    """逐帧 n 近邻，positions 形状 (S, T, N, d)，返回 (S, T, N, n)。"""
    S, T, N, _ = positions.shape
    if not 1 <= n_neighbors <= N - 1:
        raise ConfigError(f"近邻数 {n_neighbors} 必须在 [1, {N - 1}] 之间")
    out = np.empty((S, T, N, n_neighbors), dtype=np.int64)
    for s in range(S):
        for t in range(T):
            out[s, t] = kernels.nearest_neighbors(np.ascontiguousarray(positions[s, t]), n_neighbors)
    return out
