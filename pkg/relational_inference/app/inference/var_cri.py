# app/inference/var_cri.py

"""
================================================================================
 变分集体关系推断 Var-CRI (app/inference/var_cri.py)
================================================================================

模块功能:
把每个接收节点的 n 条入边按槽位顺序切成 M 个连续、互不相交的组，用组因子之积
q(z) = Π_g q_g(ζ_g) 近似精确后验，并按坐标上升逐个更新：

    ln q_g(ζ) = ln ω_{|g|}(ζ) + E_{-g}[Σ_t ln p(ẍ_i^t | ζ, ζ_{-g}, Θ)] + 常数

因子在每次 E 步开始时初始化为均匀分布，扫描 `sweeps` 次或直到因子最大变化
小于 `tol`。ω 是按组大小区分的先验表，M 步取同样大小的所有组因子的平均。

两条计算路径:
- 物理诱导解码器: 预测增量对组可加，ẍ̂ = Σ_g U_g(ζ_g)。对其余组取期望只需
  它们的均值 μ_h，于是
      ln q_g(ζ) = ln ω(ζ) - Σ_t ‖r_{-g} - U_g(ζ)‖² / (2σ²) + 常数,
      r_{-g} = ẍ - Σ_{h≠g} μ_h，
  每个节点的代价为 O(M · K^⌈n/M⌉)，不需要枚举全部 K^n 个实现。
- 消息传递解码器: 预测不可加，先算出完整的似然表，再在其上做平均场更新。
  由于组是按槽位连续切分的，实现编号 z 可以直接 reshape 成 (Z_1, ..., Z_M)。

记录的“边缘对数似然”列对 Var-CRI 而言是证据下界 ELBO。
"""
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from app.config import ExperimentConfig
from app.data.dataset import TrajectoryDataset
from app.decoder import generative
from app.decoder.bank import DecoderKind, EdgeModelBank
from app.errors import ConfigError, DegeneracyError
from app.graph.realizations import RealizationTable, enumerate_realizations
from app.graph.topology import InteractionGraph
from app.inference import common
from app.inference.common import EdgeBatch, EpochRecord
from app.nn.optim import AdamState

logger = logging.getLogger(__name__)

_EINSUM_AXES = "abcdefghijklmnopqrstuvw"


@dataclass(frozen=True)
class GroupPartition:
    """按槽位给出的分组；每个接收节点使用同一划分。"""

    groups: Tuple[Tuple[int, ...], ...]

    def __post_init__(self):
        slots = [s for g in self.groups for s in g]
        if any(len(g) == 0 for g in self.groups):
            raise ConfigError("分组不能为空")
        if slots != list(range(len(slots))):
            raise ConfigError(f"分组必须按槽位顺序连续且覆盖全部入边，收到 {self.groups}")

    @classmethod
    def contiguous(cls, n_slots: int, n_groups: int) -> "GroupPartition":
        """大小尽量相等的 M 个连续块；M 超过入边数时截为入边数。"""
        if n_groups < 1:
            raise ConfigError(f"分组数 M 必须 >= 1，收到 {n_groups}")
        m = min(n_groups, n_slots)
        if m == 0:
            return cls(())
        parts = np.array_split(np.arange(n_slots), m)
        return cls(tuple(tuple(int(s) for s in p) for p in parts))

    @property
    def n_slots(self) -> int:
        return sum(len(g) for g in self.groups)

    @property
    def sizes(self) -> List[int]:
        return [len(g) for g in self.groups]

    def tables(self, n_types: int, cap: int) -> List[RealizationTable]:
        return [enumerate_realizations(n_types, len(g), cap) for g in self.groups]

    def embedded_one_hot(self, tables: Sequence[RealizationTable]) -> List[np.ndarray]:
        """每组的 (Z_g, n, K) 独热编码，组外槽位全为零。"""
        out = []
        for group, table in zip(self.groups, tables):
            oh = np.zeros((table.size, self.n_slots, table.n_types))
            oh[:, list(group), :] = table.one_hot
            out.append(oh)
        return out


@dataclass(frozen=True)
class VarContext:
    batch: EdgeBatch
    neighbors: np.ndarray
    partition: GroupPartition
    group_tables: Tuple[RealizationTable, ...]
    group_one_hot: Tuple[np.ndarray, ...]
    full_table: Optional[RealizationTable] = None


@dataclass(frozen=True)
class VarState:
    bank: EdgeModelBank
    priors: Dict[int, np.ndarray]                   # 组大小 -> ω，长度 K^size
    adam: Tuple[AdamState, ...]
    factors: Optional[Tuple[np.ndarray, ...]] = None   # 每组 (S, N, Z_g)
    elbo: float = float("nan")
    epoch: int = 0


def prepare(dataset: TrajectoryDataset, config: ExperimentConfig, bank: EdgeModelBank) -> VarContext:
    n_types = bank.n_types
    neighbors = InteractionGraph.from_dataset(dataset, n_types).neighbor_array()
    partition = GroupPartition.contiguous(neighbors.shape[-1], config.var_cri.n_groups)
    tables = partition.tables(n_types, config.model.realization_cap)
    full = None
    if bank.kind is DecoderKind.MESSAGE_PASSING:
        full = enumerate_realizations(n_types, neighbors.shape[-1], config.model.realization_cap)
    return VarContext(
        EdgeBatch.from_dataset(dataset, neighbors), neighbors, partition,
        tuple(tables), tuple(partition.embedded_one_hot(tables)), full,
    )


def initial_priors(n_types: int, partition: GroupPartition) -> Dict[int, np.ndarray]:
    return {size: np.full(n_types ** size, 1.0 / n_types ** size) for size in sorted(set(partition.sizes))}


def _log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


def _normalize(logits: np.ndarray, group: int) -> np.ndarray:
    norm = logsumexp(logits, axis=-1, keepdims=True)
    bad = np.argwhere(~np.isfinite(norm[..., 0]))
    if bad.size:
        logger.warning("第 %d 组平均场因子在 %d 个 (模拟, 节点) 上数值塌缩，首个为 %s", group, len(bad), bad[0].tolist())
        raise DegeneracyError(f"第 {group} 组因子在 模拟 {bad[0][0]} / 节点 {bad[0][1]} 处全部为 -inf")
    return np.exp(logits - norm)


def _entropy_term(q: np.ndarray) -> np.ndarray:
    return np.sum(np.where(q > 0, q * _log(q), 0.0), axis=-1)


def _prior_term(q: np.ndarray, log_omega: np.ndarray) -> np.ndarray:
    return np.sum(np.where(q > 0, q * log_omega, 0.0), axis=-1)


def uniform_factors(n_sims: int, n_nodes: int, tables: Sequence[RealizationTable]) -> List[np.ndarray]:
    return [np.full((n_sims, n_nodes, t.size), 1.0 / t.size) for t in tables]


# ==============================================================================
# 1. 通用路径：在完整似然表上做平均场
# ==============================================================================

def _contract(ll: np.ndarray, factors: Sequence[np.ndarray], keep: Optional[int]) -> np.ndarray:
    M = len(factors)
    axes = _EINSUM_AXES[:M]
    subs = ["xy" + axes]
    ops = [ll]
    for h in range(M):
        if h != keep:
            subs.append("xy" + axes[h])
            ops.append(factors[h])
    out = "xy" + (axes[keep] if keep is not None else "")
    return np.einsum(",".join(subs) + "->" + out, *ops)


def mean_field_update(
    ll_table: np.ndarray,
    partition: GroupPartition,
    tables: Sequence[RealizationTable],
    log_omegas: Sequence[np.ndarray],
    sweeps: int = 3,
    tol: float = 1e-6,
    factors: Optional[List[np.ndarray]] = None,
) -> Tuple[List[np.ndarray], List[float]]:
    """
    在完整似然表上做坐标上升。

    Args:
        ll_table (np.ndarray): (S, N, Z) 的 Σ_t ln p(ẍ_i^t | z, Θ)，Z = K^n。
        partition (GroupPartition): 分组。
        tables: 每组的实现表。
        log_omegas: 每组的 ln ω_{|g|}。
        sweeps (int): 最多扫描次数。
        tol (float): 因子最大变化低于该值即停止。
        factors: 初始因子；缺省为均匀分布。

    Returns:
        tuple: (因子列表, 每次扫描后的 ELBO 总和)。
    """
    S, N, _ = ll_table.shape
    if not partition.groups:
        return [], [float(ll_table.sum())]
    ll = ll_table.reshape((S, N) + tuple(t.size for t in tables))
    q = list(factors) if factors is not None else uniform_factors(S, N, tables)
    history = []
    for _ in range(sweeps):
        change = 0.0
        for g in range(len(q)):
            new = _normalize(log_omegas[g] + _contract(ll, q, g), g)
            change = max(change, float(np.max(np.abs(new - q[g]))))
            q[g] = new
        elbo = _contract(ll, q, None) + sum(_prior_term(qg, lo) - _entropy_term(qg) for qg, lo in zip(q, log_omegas))
        history.append(float(elbo.sum()))
        if change < tol:
            break
    return q, history


# ==============================================================================
# 2. 可加路径：物理诱导解码器
# ==============================================================================

def _group_increments(bank: EdgeModelBank, batch: EdgeBatch, one_hots: Sequence[np.ndarray]):
    inputs = generative.edge_inputs(batch.features, batch.neighbors)
    outputs = generative.edge_outputs(bank, inputs)
    U = [generative.combine(bank, outputs, oh, batch.features, batch.masses)[0] for oh in one_hots]
    return inputs, U


def _means(U: Sequence[np.ndarray], q: Sequence[np.ndarray]) -> List[np.ndarray]:
    return [np.einsum("stizd,siz->stid", u, qg) for u, qg in zip(U, q)]


def _expected_log_likelihood(y: np.ndarray, U, q, sigma2: float) -> np.ndarray:
    """E_q[Σ_t ln p(ẍ^t)]，形状 (S, N)。"""
    mu = _means(U, q)
    resid = y - sum(mu)
    sq = np.sum(resid * resid, axis=-1)
    for u, m, qg in zip(U, mu, q):
        dev = u - m[:, :, :, None, :]
        sq = sq + np.einsum("stiz,siz->sti", np.sum(dev * dev, axis=-1), qg)
    d = y.shape[-1]
    const = -0.5 * d * generative.LOG_2PI - 0.5 * d * np.log(sigma2)
    return np.sum(-sq / (2.0 * sigma2) + const, axis=1)


def additive_mean_field(
    y: np.ndarray,
    U: Sequence[np.ndarray],
    log_omegas: Sequence[np.ndarray],
    sigma2: float,
    sweeps: int = 3,
    tol: float = 1e-6,
) -> Tuple[List[np.ndarray], List[float]]:
    """
    可加情形的坐标上升。

    Args:
        y (np.ndarray): (S, T, N, d) 真实增量。
        U: 每组 (S, T, N, Z_g, d) 的分组增量。
        log_omegas: 每组的 ln ω。
        sigma2 (float): 高斯方差。

    Returns:
        tuple: (因子列表, 每次扫描后的 ELBO 总和)。
    """
    S, _, N, _ = y.shape
    q = [np.full((S, N, u.shape[3]), 1.0 / u.shape[3]) for u in U]
    if not q:
        return [], [float(_expected_log_likelihood(y, [], [], sigma2).sum())]
    mu = _means(U, q)
    history = []
    for _ in range(sweeps):
        change = 0.0
        for g, u in enumerate(U):
            r = y - (sum(mu) - mu[g])
            diff = r[:, :, :, None, :] - u
            logits = log_omegas[g] - np.sum(diff * diff, axis=(-1, 1)) / (2.0 * sigma2)
            new = _normalize(logits, g)
            change = max(change, float(np.max(np.abs(new - q[g]))))
            q[g] = new
            mu[g] = np.einsum("stizd,siz->stid", u, new)
        elbo = _expected_log_likelihood(y, U, q, sigma2) + sum(
            _prior_term(qg, lo) - _entropy_term(qg) for qg, lo in zip(q, log_omegas)
        )
        history.append(float(elbo.sum()))
        if change < tol:
            break
    return q, history


def _additive_objective(bank, batch, one_hots, factors, max_rows) -> float:
    total = 0.0
    for sl in common.sim_chunks(batch, max(oh.shape[0] for oh in one_hots), max_rows):
        part = batch.sims(sl)
        _, U = _group_increments(bank, part, one_hots)
        total += float(_expected_log_likelihood(part.increments, U, [f[sl] for f in factors], bank.sigma2).sum())
    return total


def _additive_gradient(bank, batch, one_hots, factors, max_rows) -> Tuple[float, List[np.ndarray]]:
    """∂(-J)/∂U_g(ζ) = q_g(ζ) (U_g(ζ) - r_{-g}) / σ²。"""
    total = 0.0
    grads = [np.zeros_like(p) for _, p in bank.networks()]
    for sl in common.sim_chunks(batch, max(oh.shape[0] for oh in one_hots), max_rows):
        part = batch.sims(sl)
        q = [f[sl] for f in factors]
        inputs, U = _group_increments(bank, part, one_hots)
        total += float(_expected_log_likelihood(part.increments, U, q, bank.sigma2).sum())
        mu = _means(U, q)
        g_out = 0.0
        for g, (u, oh) in enumerate(zip(U, one_hots)):
            r = part.increments - (sum(mu) - mu[g])
            upstream = q[g][:, None, :, :, None] * (u - r[:, :, :, None, :]) / bank.sigma2
            g_out = g_out + generative.combine_vjp(bank, upstream, oh, part.masses, None)[0]
        for k, g in enumerate(generative.edge_outputs_vjp(bank, inputs, g_out)):
            grads[k] += g
    return total, grads


# ==============================================================================
# 3. EM 步骤
# ==============================================================================

def _log_omegas(priors: Dict[int, np.ndarray], partition: GroupPartition) -> List[np.ndarray]:
    return [_log(priors[size]) for size in partition.sizes]


def _joint_weights(factors: Sequence[np.ndarray]) -> np.ndarray:
    """Π_g q_g(ζ_g) 展开成 (S, N, K^n)，槽位顺序与完整实现表一致。"""
    w = factors[0]
    for f in factors[1:]:
        w = (w[..., :, None] * f[..., None, :]).reshape(w.shape[:2] + (-1,))
    return w


def e_step(state: VarState, ctx: VarContext, config: ExperimentConfig) -> VarState:
    cfg, max_rows = config.var_cri, config.training.max_rows
    batch, bank = ctx.batch, state.bank
    if not ctx.partition.groups:
        return replace(state, factors=(), elbo=float("nan"))
    log_omegas = _log_omegas(state.priors, ctx.partition)
    S, N = batch.n_sims, batch.features.shape[2]
    factors = [np.empty((S, N, t.size)) for t in ctx.group_tables]
    elbo = 0.0
    if bank.kind is DecoderKind.PHYSICS_INDUCED:
        for sl in common.sim_chunks(batch, max(t.size for t in ctx.group_tables), max_rows):
            part = batch.sims(sl)
            _, U = _group_increments(bank, part, ctx.group_one_hot)
            q, history = additive_mean_field(part.increments, U, log_omegas, bank.sigma2, cfg.sweeps, cfg.tol)
            for g, qg in enumerate(q):
                factors[g][sl] = qg
            elbo += history[-1]
    else:
        ll = common.log_likelihood_table(bank, batch, ctx.full_table.one_hot, max_rows).sum(axis=1)
        q, history = mean_field_update(ll, ctx.partition, ctx.group_tables, log_omegas, cfg.sweeps, cfg.tol)
        factors, elbo = q, history[-1]
    return replace(state, factors=tuple(factors), elbo=float(elbo))


def q_var(state: VarState, ctx: VarContext, max_rows: int = common.DEFAULT_MAX_ROWS) -> float:
    """Q_var = Σ_g E_q[ln ω(ζ_g)] + E_q[Σ_t ln p(ẍ^t | Θ)]。"""
    if state.factors is None:
        raise DegeneracyError("尚未执行 E 步，变分因子未定义")
    log_omegas = _log_omegas(state.priors, ctx.partition)
    prior = sum(float(_prior_term(q, lo).sum()) for q, lo in zip(state.factors, log_omegas))
    return prior + _theta_objective(state.bank, ctx, state.factors, max_rows)


def _theta_objective(bank, ctx: VarContext, factors, max_rows) -> float:
    if bank.kind is DecoderKind.PHYSICS_INDUCED:
        return _additive_objective(bank, ctx.batch, ctx.group_one_hot, factors, max_rows)
    weights = _joint_weights(factors)[:, None]
    return common.weighted_objective(bank, ctx.batch, ctx.full_table.one_hot, weights, max_rows)


def m_step_priors(state: VarState, ctx: VarContext) -> VarState:
    """ω_size = 所有大小为 size 的组因子的平均。"""
    if not state.factors:
        raise DegeneracyError("图中没有边，无法更新组先验 ω")
    priors = {}
    for size in sorted(set(ctx.partition.sizes)):
        stacked = [q.reshape(-1, q.shape[-1]) for q, s in zip(state.factors, ctx.partition.sizes) if s == size]
        mean = np.concatenate(stacked).mean(axis=0)
        priors[size] = mean / mean.sum()
    return replace(state, priors=priors)


def m_step_theta(
    state: VarState, ctx: VarContext, config: ExperimentConfig, rng: np.random.Generator
) -> Tuple[VarState, common.ThetaStep]:
    training = config.training
    sub = ctx
    steps = common.sample_steps(ctx.batch.n_steps, training.batch_steps, rng)
    if steps is not None:
        sub = replace(ctx, batch=ctx.batch.steps(steps))
    factors = state.factors
    if state.bank.kind is DecoderKind.PHYSICS_INDUCED:
        gradient = lambda b: _additive_gradient(b, sub.batch, sub.group_one_hot, factors, training.max_rows)
    else:
        weights = _joint_weights(factors)[:, None]
        gradient = lambda b: common.weighted_gradient(b, sub.batch, sub.full_table.one_hot, weights, training.max_rows)
    bank, adam, info = common.gem_theta_step(
        state.bank, state.adam, lambda b: _theta_objective(b, sub, factors, training.max_rows), gradient,
        training.max_halvings,
    )
    return replace(state, bank=bank, adam=adam), info


def run_epoch(
    state: VarState, ctx: VarContext, config: ExperimentConfig, rng: np.random.Generator
) -> Tuple[VarState, EpochRecord]:
    state = e_step(state, ctx, config)
    state = m_step_priors(state, ctx)
    q = q_var(state, ctx, config.training.max_rows)
    state, info = m_step_theta(state, ctx, config, rng)
    state = replace(state, epoch=state.epoch + 1)
    return state, EpochRecord(state.epoch, state.elbo, q, info.halvings)


def infer_edge_types(state: VarState, ctx: VarContext) -> np.ndarray:
    """每组取因子最大的组实现（并列取编号最小者），拼成每条有向边的类型。"""
    S, N, n = ctx.neighbors.shape
    slot_types = np.zeros((S, N, n), dtype=np.int64)
    for group, table, q in zip(ctx.partition.groups, ctx.group_tables, state.factors):
        slot_types[:, :, list(group)] = table.digits[np.argmax(q, axis=-1)]
    types = np.full((S, N, N), -1, dtype=np.int64)
    np.put_along_axis(types, ctx.neighbors, slot_types, axis=2)
    return types


def infer_types(bank: EdgeModelBank, priors: Dict[int, np.ndarray], dataset: TrajectoryDataset, config: ExperimentConfig) -> np.ndarray:
    ctx = prepare(dataset, config, bank)
    state = e_step(VarState(bank, priors, ()), ctx, config)
    return infer_edge_types(state, ctx)
