# app/graph/realizations.py

"""
================================================================================
 子图实现枚举 (app/graph/realizations.py)
================================================================================

模块功能:
一个中心节点 v_i 有 n 条入边时，其子图共有 K^n 种“实现”（每条边各取一种
类型）。本模块把这些实现编号为 z ∈ [0, K^n)，并提供：

- φ 映射: φ(z, slot) 是 z 的 K 进制表示中第 `slot` 位数字。slot 0 是最高位，
  slot 按邻居节点下标升序排列。因此 digits 的行序与
  `itertools.product(range(K), repeat=n)` 完全一致。
- 类型计数 C_z(k): 实现 z 中类型为 k 的边数，Σ_k C_z(k) = n。
- 先验: π_z = Π_k τ_k^{C_z(k)}。

实现编号会写进诊断输出和检查点，上述位序是对外约定。
"""
import itertools
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from app.errors import CapacityError, ConfigError

DEFAULT_REALIZATION_CAP = 2 ** 20


@dataclass(frozen=True)
class RealizationTable:
    n_types: int
    digits: np.ndarray      # (Z, n) int64，φ 表
    counts: np.ndarray      # (Z, K) int64，C_z(k)

    @property
    def n_slots(self) -> int:
        return self.digits.shape[1]

    @property
    def size(self) -> int:
        return self.digits.shape[0]

    @property
    def one_hot(self) -> np.ndarray:
        """(Z, n, K) 的 0/1 数组，one_hot[z, slot, φ(z, slot)] = 1。"""
        return np.eye(self.n_types)[self.digits] if self.n_slots else np.zeros((self.size, 0, self.n_types))

    def phi(self, z: int, slot: int) -> int:
        return int(self.digits[z, slot])

    def encode(self, digits: Sequence[int]) -> int:
        """φ 的逆映射：按 K 进制位值重建实现编号。"""
        z = 0
        for d in digits:
            z = z * self.n_types + int(d)
        return z


def enumerate_realizations(
    n_types: int, neighbors: Union[int, Sequence[int]], cap: int = DEFAULT_REALIZATION_CAP
) -> RealizationTable:
    """
    枚举 K^n 种子图实现。

    Args:
        n_types (int): 类型数 K >= 1。
        neighbors: 邻居下标列表，或直接给出入边数 n。
        cap (int): 实现总数上限。

    Returns:
        RealizationTable: 按 K 进制计数顺序排列的实现表。
    """
    n = neighbors if isinstance(neighbors, (int, np.integer)) else len(neighbors)
    if n_types < 1 or n < 0:
        raise ConfigError(f"类型数 K={n_types} 必须 >= 1，入边数 n={n} 必须 >= 0")
    total = n_types ** n
    if total > cap:
        raise CapacityError(
            f"子图实现数 K^n = {n_types}^{n} = {total} 超过上限 {cap}，请改用 var-cri 方法"
        )
    digits = np.array(list(itertools.product(range(n_types), repeat=n)), dtype=np.int64).reshape(total, n)
    counts = np.stack([(digits == k).sum(axis=1) for k in range(n_types)], axis=1).astype(np.int64)
    return RealizationTable(n_types=n_types, digits=digits, counts=counts)


def check_type_priors(tau: np.ndarray, n_types: int) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64)
    if tau.shape != (n_types,):
        raise ConfigError(f"类型先验 τ 的长度应为 K={n_types}，收到形状 {tau.shape}")
    if np.any(tau < 0) or abs(tau.sum() - 1.0) > 1e-9:
        raise ConfigError(f"类型先验 τ 必须是概率向量，当前和为 {tau.sum()!r}")
    return tau


def prior_of_realization(tau: np.ndarray, table: RealizationTable, z: int) -> float:
    """π_z = Π_k τ_k^{C_z(k)}。"""
    tau = check_type_priors(tau, table.n_types)
    return float(np.prod(tau ** table.counts[z]))


def realization_log_priors(tau: np.ndarray, table: RealizationTable) -> np.ndarray:
    """所有实现的 ln π_z，形状 (Z,)。τ_k = 0 且 C_z(k) > 0 时为 -inf。"""
    tau = check_type_priors(tau, table.n_types)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(table.counts > 0, table.counts * np.log(tau), 0.0)
    return terms.sum(axis=1)
