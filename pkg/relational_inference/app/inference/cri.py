# app/inference/cri.py

"""
================================================================================
 集体关系推断 CRI (app/inference/cri.py)
================================================================================

模块功能:
以每个 (模拟 s, 接收节点 i) 的子图 S_(i) 为单位做精确 EM：

- E 步: P[s, i, z] ∝ π_z · Π_t p(ẍ_i^t | z, Θ)，在对数空间计算，按行做
  log-sum-exp 归一化；同时记录边缘对数似然 Σ_{s,i} ln Σ_z π_z Π_t p(·)。
- 先验 M 步: χ_ik = Σ_z P[i, z] C_z(k)，τ_k = Σ_i χ_ik / Σ_i Σ_k' χ_ik'。
- Θ 的 M 步: 对 Q 中依赖 Θ 的一项做一步 Adam（见 `app.inference.common`）。

要求所有接收节点的入边数相同（全连接图或固定邻接），这样一张实现表即可
服务全部子图。入边数不一致的数据请使用 evolving-cri。
"""
import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from app.config import ExperimentConfig
from app.data.dataset import TrajectoryDataset
from app.decoder.bank import EdgeModelBank
from app.errors import DegeneracyError
from app.graph.realizations import RealizationTable, enumerate_realizations, realization_log_priors
from app.graph.topology import InteractionGraph
from app.inference import common
from app.inference.common import EdgeBatch, EpochRecord
from app.nn.optim import AdamState

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CriContext:
    batch: EdgeBatch
    neighbors: np.ndarray          # (S, N, n)
    table: RealizationTable


@dataclass(frozen=True)
class CriState:
    bank: EdgeModelBank
    priors: np.ndarray                              # τ，形状 (K,)
    adam: Tuple[AdamState, ...]
    posterior: Optional[np.ndarray] = None          # P，形状 (S, N, Z)
    log_likelihoods: Optional[np.ndarray] = None    # Σ_t LL，形状 (S, N, Z)
    marginal_log_likelihood: float = float("nan")
    epoch: int = 0

    def log_priors(self, table: RealizationTable) -> np.ndarray:
        """由当前 τ 重新计算的 ln π_z。"""
        return realization_log_priors(self.priors, table)


def prepare(dataset: TrajectoryDataset, config: ExperimentConfig) -> CriContext:
    n_types = config.system.n_types
    neighbors = InteractionGraph.from_dataset(dataset, n_types).neighbor_array()
    table = enumerate_realizations(n_types, neighbors.shape[-1], config.model.realization_cap)
    return CriContext(EdgeBatch.from_dataset(dataset, neighbors), neighbors, table)


def initial_priors(n_types: int) -> np.ndarray:
    return np.full(n_types, 1.0 / n_types)


def normalize_rows(log_joint: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """按最后一维做 log-sum-exp 归一化，返回 (后验, 行对数归一化常数)。"""
    norm = logsumexp(log_joint, axis=-1, keepdims=True)
    bad = np.argwhere(~np.isfinite(norm[..., 0]))
    if bad.size:
        logger.warning("E 步在 %d 个 (模拟, 节点) 上数值塌缩，首个为 %s", len(bad), bad[0].tolist())
        raise DegeneracyError(f"后验在 模拟 {bad[0][0]} / 节点 {bad[0][1]} 处全部为 -inf（数值塌缩）")
    return np.exp(log_joint - norm), norm[..., 0]


def e_step(state: CriState, ctx: CriContext, max_rows: int = common.DEFAULT_MAX_ROWS) -> CriState:
    ll = common.log_likelihood_table(state.bank, ctx.batch, ctx.table.one_hot, max_rows).sum(axis=1)
    posterior, norm = normalize_rows(state.log_priors(ctx.table)[None, None, :] + ll)
    return replace(
        state, posterior=posterior, log_likelihoods=ll, marginal_log_likelihood=float(norm.sum())
    )


def q_function(
    state: CriState, table: RealizationTable, batch: Optional[EdgeBatch] = None, max_rows: int = common.DEFAULT_MAX_ROWS
) -> float:
    """
    Q = Σ_{s,i} Σ_z P[s,i,z] (ln π_z + Σ_t ln p(ẍ_i^t | z, Θ))。

    给出 batch 时用 state.bank 重新计算似然（即 Q(Θ | Θ_now)），否则使用 E 步缓存。
    """
    if state.posterior is None:
        raise DegeneracyError("尚未执行 E 步，后验未定义")
    ll = state.log_likelihoods
    if batch is not None:
        ll = common.log_likelihood_table(state.bank, batch, table.one_hot, max_rows).sum(axis=1)
    P = state.posterior
    return float(np.sum(np.where(P > 0, P * (state.log_priors(table)[None, None, :] + ll), 0.0)))


def expected_type_counts(posterior: np.ndarray, table: RealizationTable) -> np.ndarray:
    """χ[s, i, k] = Σ_z P[s, i, z] C_z(k)。"""
    return posterior @ table.counts.astype(np.float64)


def m_step_priors(state: CriState, table: RealizationTable) -> CriState:
    totals = expected_type_counts(state.posterior, table).reshape(-1, table.n_types).sum(axis=0)
    if totals.sum() <= 0:
        raise DegeneracyError("期望边类型计数之和为零，无法更新 τ（图中没有边）")
    return replace(state, priors=totals / totals.sum())


def m_step_theta(
    state: CriState, ctx: CriContext, config: ExperimentConfig, rng: np.random.Generator
) -> Tuple[CriState, common.ThetaStep]:
    training = config.training
    batch = ctx.batch
    steps = common.sample_steps(batch.n_steps, training.batch_steps, rng)
    if steps is not None:
        batch = batch.steps(steps)
    weights = state.posterior[:, None]
    one_hot = ctx.table.one_hot
    bank, adam, info = common.gem_theta_step(
        state.bank,
        state.adam,
        lambda b: common.weighted_objective(b, batch, one_hot, weights, training.max_rows),
        lambda b: common.weighted_gradient(b, batch, one_hot, weights, training.max_rows),
        training.max_halvings,
    )
    return replace(state, bank=bank, adam=adam), info


def run_epoch(
    state: CriState, ctx: CriContext, config: ExperimentConfig, rng: np.random.Generator
) -> Tuple[CriState, EpochRecord]:
    """E 步 -> τ 更新 -> 一步 Θ 更新。"""
    state = e_step(state, ctx, config.training.max_rows)
    state = m_step_priors(state, ctx.table)
    q = q_function(state, ctx.table)
    state, info = m_step_theta(state, ctx, config, rng)
    state = replace(state, epoch=state.epoch + 1)
    return state, EpochRecord(state.epoch, state.marginal_log_likelihood, q, info.halvings)


def infer_edge_types(state: CriState, ctx: CriContext) -> np.ndarray:
    """
    每个子图取后验最大的实现（并列时取编号最小者），再经 φ 映射成有向边类型。

    Returns:
        np.ndarray: (S, N, N) 的类型矩阵，types[s, i, j] 是 e_{i,j} 的类型，无边处为 -1。
    """
    best = np.argmax(state.posterior, axis=-1)
    digits = ctx.table.digits[best]
    S, N, _ = ctx.neighbors.shape
    types = np.full((S, N, N), -1, dtype=np.int64)
    np.put_along_axis(types, ctx.neighbors, digits, axis=2)
    return types


def infer_types(bank: EdgeModelBank, priors: np.ndarray, dataset: TrajectoryDataset, config: ExperimentConfig) -> np.ndarray:
    """用给定的 Θ 与 τ 在任意数据集上做一次 E 步并读出边类型。"""
    ctx = prepare(dataset, config)
    state = e_step(CriState(bank, priors, ()), ctx, config.training.max_rows)
    return infer_edge_types(state, ctx)
