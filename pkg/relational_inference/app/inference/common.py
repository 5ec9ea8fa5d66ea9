# app/inference/common.py

"""
================================================================================
 推断算法的公共部件 (app/inference/common.py)
================================================================================

三种推断方法（CRI、Var-CRI、Evolving-CRI）共享同一个计算骨架：

1. 在全部 (s, t, i, z) 上求条件对数似然表 LL[s, t, i, z]；
2. 用后验权重 W[s, t, i, z] 加权得到 Q 函数中依赖 Θ 的一项
       J(Θ) = Σ W · LL；
3. 对 -J 做一步 Adam（广义 EM 的 M 步），若 J 没有上升则把步长减半重试。

为控制内存，所有批量计算都按模拟分块进行，每块包含的边数不超过 `max_rows`。
"""
import logging
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from app.data.dataset import TrajectoryDataset
from app.decoder import generative
from app.decoder.bank import EdgeModelBank
from app.errors import CompatibilityError, NumericError
from app.nn.optim import AdamState, adam_moments, adam_update

logger = logging.getLogger(__name__)

DEFAULT_MAX_ROWS = 1 << 16


@dataclass
class EdgeBatch:
    features: np.ndarray     # (S, T, N, F)
    increments: np.ndarray   # (S, T, N, d)
    masses: np.ndarray       # (S, N)
    neighbors: np.ndarray    # (S, N, n) 或 (S, T, N, n)

    @classmethod
    def from_dataset(cls, dataset: TrajectoryDataset, neighbors: np.ndarray) -> "EdgeBatch":
        return cls(dataset.node_features(), dataset.increments, dataset.masses, neighbors)

    @property
    def n_sims(self) -> int:
        return self.features.shape[0]

    @property
    def n_steps(self) -> int:
        return self.features.shape[1]

    @property
    def n_slots(self) -> int:
        return self.neighbors.shape[-1]

    def sims(self, sl: slice) -> "EdgeBatch":
        return EdgeBatch(self.features[sl], self.increments[sl], self.masses[sl], self.neighbors[sl])

    def steps(self, index: np.ndarray) -> "EdgeBatch":
        nb = self.neighbors[:, index] if self.neighbors.ndim == 4 else self.neighbors
        return EdgeBatch(self.features[:, index], self.increments[:, index], self.masses, nb)


@dataclass(frozen=True)
class ThetaStep:
    objective_before: float
    objective_after: float
    halvings: int
    accepted: bool


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    marginal_log_likelihood: float
    q: float
    halvings: int


def check_compatible(bank: EdgeModelBank, dataset: TrajectoryDataset) -> None:
    if bank.node_width != dataset.feature_width:
        raise CompatibilityError(
            f"边网络按节点特征宽度 {bank.node_width} 构建，数据集 ({dataset.feature_layout}) 为 {dataset.feature_width}"
        )
    if bank.dims != dataset.dims:
        raise CompatibilityError(f"解码器输出维度 {bank.dims} 与数据维度 {dataset.dims} 不符")


def sim_chunks(batch: EdgeBatch, n_realizations: int, max_rows: int) -> Iterator[slice]:
    per_sim = max(1, batch.n_steps * batch.features.shape[2] * max(batch.n_slots, 1) * max(n_realizations, 1))
    size = max(1, max_rows // per_sim)
    for start in range(0, batch.n_sims, size):
        yield slice(start, min(start + size, batch.n_sims))


def _predict(bank: EdgeModelBank, batch: EdgeBatch, one_hot: np.ndarray):
    inputs = generative.edge_inputs(batch.features, batch.neighbors)
    outputs = generative.edge_outputs(bank, inputs)
    pred, node_in = generative.combine(bank, outputs, one_hot, batch.features, batch.masses)
    return inputs, pred, node_in


def log_likelihood_table(
    bank: EdgeModelBank, batch: EdgeBatch, one_hot: np.ndarray, max_rows: int = DEFAULT_MAX_ROWS
) -> np.ndarray:
    """LL[s, t, i, z] = ln p(ẍ_i^t | z, Θ)，形状 (S, T, N, Z)。"""
    S, T, N = batch.features.shape[:3]
    out = np.empty((S, T, N, one_hot.shape[0]))
    for sl in sim_chunks(batch, one_hot.shape[0], max_rows):
        part = batch.sims(sl)
        _, pred, _ = _predict(bank, part, one_hot)
        out[sl] = generative.gaussian_log_likelihood(bank.sigma2, part.increments[:, :, :, None, :], pred)
    return out


def _weighted_sum(weights: np.ndarray, values: np.ndarray) -> float:
    # 0 · (-inf) 按 0 处理
    return float(np.sum(np.where(weights > 0, weights * values, 0.0)))


def weighted_objective(
    bank: EdgeModelBank, batch: EdgeBatch, one_hot: np.ndarray, weights: np.ndarray, max_rows: int = DEFAULT_MAX_ROWS
) -> float:
    """J(Θ) = Σ_{s,t,i,z} W[s,t,i,z] · LL[s,t,i,z]；weights 可在时间轴上广播。"""
    total = 0.0
    for sl in sim_chunks(batch, one_hot.shape[0], max_rows):
        part = batch.sims(sl)
        _, pred, _ = _predict(bank, part, one_hot)
        ll = generative.gaussian_log_likelihood(bank.sigma2, part.increments[:, :, :, None, :], pred)
        total += _weighted_sum(np.broadcast_to(weights[sl], ll.shape), ll)
    return total


def weighted_gradient(
    bank: EdgeModelBank, batch: EdgeBatch, one_hot: np.ndarray, weights: np.ndarray, max_rows: int = DEFAULT_MAX_ROWS
) -> Tuple[float, List[np.ndarray]]:
    """
    返回 J(Θ) 以及 -J 对每个网络参数的梯度（顺序同 `bank.networks()`）。

    ∂(-J)/∂pred[s,t,i,z] = -W[s,t,i,z] · (ẍ_i^t - pred) / σ²。
    """
    total = 0.0
    grads = [np.zeros_like(p) for _, p in bank.networks()]
    for sl in sim_chunks(batch, one_hot.shape[0], max_rows):
        part = batch.sims(sl)
        inputs, pred, node_in = _predict(bank, part, one_hot)
        bad = np.argwhere(~np.isfinite(pred))
        if bad.size:
            s, t, i, z = bad[0][:4]
            raise NumericError(f"预测增量在 模拟 {sl.start + s} / 节点 {i} / 实现 {z} / 时间步 {t} 处不是有限数")
        truth = part.increments[:, :, :, None, :]
        w = np.broadcast_to(weights[sl], pred.shape[:-1])
        total += _weighted_sum(w, generative.gaussian_log_likelihood(bank.sigma2, truth, pred))
        upstream = -w[..., None] * (truth - pred) / bank.sigma2
        g_out, node_grad = generative.combine_vjp(bank, upstream, one_hot, part.masses, node_in)
        for k, g in enumerate(generative.edge_outputs_vjp(bank, inputs, g_out)):
            grads[k] += g
        if node_grad is not None:
            grads[-1] += node_grad
    return total, grads


def gem_theta_step(
    bank: EdgeModelBank,
    adam: Sequence[AdamState],
    objective: Callable[[EdgeModelBank], float],
    gradient: Callable[[EdgeModelBank], Tuple[float, List[np.ndarray]]],
    max_halvings: int = 10,
) -> Tuple[EdgeModelBank, Tuple[AdamState, ...], ThetaStep]:
    """
    广义 EM 的 Θ 更新：对 -J 做一步 Adam，要求 J(Θ_new) >= J(Θ_now)。

    不满足时在同一组矩估计下把步长减半，最多 `max_halvings` 次；仍不满足则
    保持参数与优化器状态不变。
    """
    before, grads = gradient(bank)
    advanced = tuple(adam_moments(g, st) for g, st in zip(grads, adam))
    nets = bank.networks()
    slack = 1e-12 * max(1.0, abs(before))
    scale = 1.0
    for attempt in range(max_halvings + 1):
        candidate = bank.with_params([adam_update(p, st, scale) for (_, p), st in zip(nets, advanced)])
        after = objective(candidate)
        if np.isfinite(after) and after >= before - slack:
            return candidate, advanced, ThetaStep(before, after, attempt, True)
        logger.debug("Θ 步使 J 从 %.12g 降到 %.12g，步长减半 (第 %d 次)", before, after, attempt + 1)
        scale *= 0.5
    logger.warning("步长减半 %d 次后 J 仍未上升，本轮保持 Θ 不变", max_halvings)
    return bank, tuple(adam), ThetaStep(before, before, max_halvings, False)


def sample_steps(n_steps: int, batch_steps: Optional[int], rng: np.random.Generator) -> Optional[np.ndarray]:
    """M 步时间步小批量；batch_steps 为空或不小于 T 时使用全部时间步。"""
    if batch_steps is None or batch_steps >= n_steps:
        return None
    return np.sort(rng.choice(n_steps, size=batch_steps, replace=False))
