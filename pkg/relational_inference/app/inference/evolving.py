# app/inference/evolving.py

"""
================================================================================
 演化拓扑下的关系推断 Evolving-CRI (app/inference/evolving.py)
================================================================================

模块功能:
活跃边集 E^t 随时间变化，但每条边的类型不变。后验按边分解为边缘分布
p(z_{i,j} | ẍ^{1:t})，并按时间顺序归纳更新：

    p(z_{i,j} | ẍ^{1:t}) ∝ Σ_{z_{i,-j}} Π_{j'} p(z_{i,j'} | ẍ^{1:t-1}) · p(ẍ_i^t | z_{i,j}, z_{i,-j})

其中求和遍历 Γ^t(i) 中其余活跃边的全部类型组合。同一时间步内所有活跃边都从
t-1 时刻的快照同步更新；不活跃的边保持不变。每次 E 步开始时全部边缘分布重置
为 τ。

M 步: τ_k 取全部边最终边缘分布在类型 k 上的平均；Θ 对

    Q = Σ_{e} Σ_k p*_e(k) ln τ_k + Σ_{s,t,i} E_{Π p*}[ln p(ẍ_i^t | z, Θ)]

中依赖 Θ 的一项做一步 Adam。
"""
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from app.config import ExperimentConfig
from app.data.dataset import TrajectoryDataset
from app.decoder.bank import EdgeModelBank
from app.errors import DegeneracyError
from app.graph.realizations import RealizationTable, enumerate_realizations
from app.graph.topology import InteractionGraph
from app.inference import common
from app.inference.common import EdgeBatch, EpochRecord
from app.nn.optim import AdamState

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvolvingContext:
    batch: EdgeBatch               # neighbors 为逐帧 (S, T, N, n)
    graph: InteractionGraph
    table: RealizationTable
    edge_mask: np.ndarray          # (S, N, N)，并集图中存在的边


@dataclass(frozen=True)
class EvolvingState:
    bank: EdgeModelBank
    priors: np.ndarray                              # τ
    adam: Tuple[AdamState, ...]
    log_marginals: Optional[np.ndarray] = None      # (S, N, N, K)
    log_evidence: float = float("nan")
    epoch: int = 0

    @property
    def marginals(self) -> np.ndarray:
        return np.exp(self.log_marginals)


def prepare(dataset: TrajectoryDataset, config: ExperimentConfig, n_types: int) -> EvolvingContext:
    graph = InteractionGraph.from_dataset(dataset, n_types, config.evolving.n_neighbors)
    step_nb = graph.step_neighbor_array(dataset.n_steps)
    table = enumerate_realizations(n_types, step_nb.shape[-1], config.model.realization_cap)
    mask = np.zeros((dataset.n_sims, dataset.n_nodes, dataset.n_nodes), dtype=bool)
    for s, rows in enumerate(graph.union):
        for i, nb in enumerate(rows):
            mask[s, i, nb] = True
    return EvolvingContext(EdgeBatch.from_dataset(dataset, step_nb), graph, table, mask)


def initial_priors(n_types: int) -> np.ndarray:
    return np.full(n_types, 1.0 / n_types)


def _log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


def _slot_log_marginals(log_marginals: np.ndarray, neighbors_t: np.ndarray) -> np.ndarray:
    S, N, _ = neighbors_t.shape
    return log_marginals[np.arange(S)[:, None, None], np.arange(N)[None, :, None], neighbors_t]


def _realization_log_weights(slot_lm: np.ndarray, table: RealizationTable) -> np.ndarray:
    """ln Π_c p(z_c = φ(z, c))，形状 (S, N, Z)。"""
    slots = np.broadcast_to(np.arange(table.n_slots), table.digits.shape)
    return slot_lm[:, :, slots, table.digits].sum(axis=-1)


def posterior_induction_step(
    log_marginals: np.ndarray,
    neighbors_t: np.ndarray,
    log_likelihoods_t: np.ndarray,
    table: RealizationTable,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    用 t 时刻的观测更新活跃边的边缘分布。

    Args:
        log_marginals (np.ndarray): (S, N, N, K) t-1 时刻的对数边缘分布。
        neighbors_t (np.ndarray): (S, N, n) t 时刻的活跃邻居。
        log_likelihoods_t (np.ndarray): (S, N, Z) ln p(ẍ_i^t | z, Θ)，z 按 neighbors_t 的槽位编号。
        table (RealizationTable): n 个槽位的实现表。

    Returns:
        tuple: (新的对数边缘分布, 每个接收节点的对数归一化常数 (S, N))。
    """
    slot_lm = _slot_log_marginals(log_marginals, neighbors_t)
    log_joint = _realization_log_weights(slot_lm, table) + log_likelihoods_t
    evidence = logsumexp(log_joint, axis=-1)
    bad = np.argwhere(~np.isfinite(evidence))
    if bad.size:
        logger.warning("后验归纳在 %d 个 (模拟, 节点) 上数值塌缩，首个为 %s", len(bad), bad[0].tolist())
        raise DegeneracyError(f"边缘分布在 模拟 {bad[0][0]} / 节点 {bad[0][1]} 处塌缩为 -inf")
    # mask[c, k, z] = 0 当 φ(z, c) = k，否则 -inf
    mask = np.where(np.transpose(table.one_hot, (1, 2, 0)) > 0, 0.0, -np.inf)
    with np.errstate(invalid="ignore"):
        updated = logsumexp(log_joint[:, :, None, None, :] + mask, axis=-1) - evidence[:, :, None, None]
    out = log_marginals.copy()
    S, N, _ = neighbors_t.shape
    out[np.arange(S)[:, None, None], np.arange(N)[None, :, None], neighbors_t] = updated
    return out, evidence


def induction_pass(state: EvolvingState, ctx: EvolvingContext, max_rows: int = common.DEFAULT_MAX_ROWS) -> EvolvingState:
    """从 τ 出发按时间顺序归纳一遍全部时间步。"""
    batch = ctx.batch
    S, T, N = batch.features.shape[:3]
    ll = common.log_likelihood_table(state.bank, batch, ctx.table.one_hot, max_rows)
    log_m = np.broadcast_to(_log(state.priors), (S, N, N, len(state.priors))).copy()
    total = 0.0
    for t in range(T):
        log_m, evidence = posterior_induction_step(log_m, batch.neighbors[:, t], ll[:, t], ctx.table)
        total += float(evidence.sum())
    return replace(state, log_marginals=log_m, log_evidence=total)


def realization_weights(log_marginals: np.ndarray, batch: EdgeBatch, table: RealizationTable) -> np.ndarray:
    """W[s, t, i, z] = Π_c p*(z_{i, Γ^t(i)_c} = φ(z, c))，形状 (S, T, N, Z)。"""
    T = batch.n_steps
    W = np.empty(batch.features.shape[:3] + (table.size,))
    for t in range(T):
        W[:, t] = np.exp(_realization_log_weights(_slot_log_marginals(log_marginals, batch.neighbors[:, t]), table))
    return W


def q_evolving(state: EvolvingState, ctx: EvolvingContext, max_rows: int = common.DEFAULT_MAX_ROWS) -> float:
    if state.log_marginals is None:
        raise DegeneracyError("尚未执行归纳，边缘分布未定义")
    p = state.marginals[ctx.edge_mask]
    prior = float(np.sum(np.where(p > 0, p * _log(state.priors), 0.0)))
    W = realization_weights(state.log_marginals, ctx.batch, ctx.table)
    return prior + common.weighted_objective(state.bank, ctx.batch, ctx.table.one_hot, W, max_rows)


def m_step_priors(state: EvolvingState, ctx: EvolvingContext) -> EvolvingState:
    p = state.marginals[ctx.edge_mask]
    if p.shape[0] == 0:
        raise DegeneracyError("图中没有边，无法更新 τ")
    tau = p.mean(axis=0)
    return replace(state, priors=tau / tau.sum())


def m_step_theta(
    state: EvolvingState, ctx: EvolvingContext, config: ExperimentConfig, rng: np.random.Generator
) -> Tuple[EvolvingState, common.ThetaStep]:
    training = config.training
    batch = ctx.batch
    W = realization_weights(state.log_marginals, batch, ctx.table)
    steps = common.sample_steps(batch.n_steps, training.batch_steps, rng)
    if steps is not None:
        batch, W = batch.steps(steps), W[:, steps]
    one_hot = ctx.table.one_hot
    bank, adam, info = common.gem_theta_step(
        state.bank,
        state.adam,
        lambda b: common.weighted_objective(b, batch, one_hot, W, training.max_rows),
        lambda b: common.weighted_gradient(b, batch, one_hot, W, training.max_rows),
        training.max_halvings,
    )
    return replace(state, bank=bank, adam=adam), info


def run_epoch(
    state: EvolvingState, ctx: EvolvingContext, config: ExperimentConfig, rng: np.random.Generator
) -> Tuple[EvolvingState, EpochRecord]:
    state = induction_pass(state, ctx, config.training.max_rows)
    state = m_step_priors(state, ctx)
    q = q_evolving(state, ctx, config.training.max_rows)
    state, info = m_step_theta(state, ctx, config, rng)
    state = replace(state, epoch=state.epoch + 1)
    return state, EpochRecord(state.epoch, state.log_evidence, q, info.halvings)


def infer_edge_types(state: EvolvingState, ctx: EvolvingContext) -> np.ndarray:
    """每条边取边缘分布最大的类型（并列取编号最小者），不存在的边为 -1。"""
    best = np.argmax(state.log_marginals, axis=-1)
    return np.where(ctx.edge_mask, best, -1).astype(np.int64)


def infer_types(bank: EdgeModelBank, priors: np.ndarray, dataset: TrajectoryDataset, config: ExperimentConfig) -> np.ndarray:
    ctx = prepare(dataset, config, bank.n_types)
    state = induction_pass(EvolvingState(bank, priors, ()), ctx, config.training.max_rows)
    return infer_edge_types(state, ctx)


def marginal_frame(state: EvolvingState, ctx: EvolvingContext) -> pd.DataFrame:
    """每条边一行：sim, receiver, sender, p_0 .. p_{K-1}。"""
    s, i, j = np.nonzero(ctx.edge_mask)
    frame = pd.DataFrame({"sim": s, "receiver": i, "sender": j})
    probs = state.marginals[s, i, j]
    for k in range(probs.shape[1]):
        frame[f"p_{k}"] = probs[:, k]
    return frame


def write_marginals_csv(state: EvolvingState, ctx: EvolvingContext, path: Path) -> None:
    marginal_frame(state, ctx).to_csv(path, index=False, float_format="%.17g")
