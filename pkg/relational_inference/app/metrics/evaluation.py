# app/metrics/evaluation.py

"""
================================================================================
 评估指标 (app/metrics/evaluation.py)
================================================================================

模块功能:
- `permutation_accuracy`: 在 K! 个标签置换上取最大的边类型准确率。
- `mae_ef`: 预测成对力与参考成对力的平均绝对误差（逐分量平均）。
- `mae_symm`: 牛顿第三定律违背程度 |f̂_ij + f̂_ji| 的逐分量平均。
- `mae_increment`: 推断类型下预测增量的平均绝对误差。
- `rollout_mae_state`: 用推断类型滚动预测 h 步后，位置与速度合并的平均绝对误差。
- `build_report` / `aggregate_reports` / `edge_frame`: 汇总为 `EvaluationReport`、
  多种子均值与标准差、逐边正误表。

力与对称性指标只对物理诱导解码器有意义；消息传递解码器或 VAR 数据会抛出
`UnsupportedMetricError`，`build_report` 把它记为 null 并写明原因。
"""
import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.data.dataset import TrajectoryDataset, build_features
from app.decoder import generative
from app.decoder.bank import DecoderKind, EdgeModelBank
from app.errors import CapacityError, DataError, UnsupportedMetricError
from app.graph.topology import InteractionGraph, knn_neighbors
from app.metrics.report import EvaluationReport
from app.nn import mlp
from app.physics.kernels import DIVERGENCE_LIMIT
from app.physics.systems import ParticleSystemSpec, SystemKind, pairwise_forces
from app.physics.teacher import teacher_bank

logger = logging.getLogger(__name__)

MAX_PERMUTATION_TYPES = 6

# (types (E,), x_i (E, F), x_j (E, F)) -> 参考力 (E, d)
ReferenceForce = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


# ==============================================================================
# 1. 边类型准确率
# ==============================================================================

def confusion_matrix(predicted: np.ndarray, truth: np.ndarray, n_types: int) -> np.ndarray:
    """w[p, t] = 预测为 p 且真值为 t 的边数，只统计真值存在 (>= 0) 的边。"""
    predicted = np.asarray(predicted).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if predicted.shape != truth.shape:
        raise DataError(f"预测 {predicted.shape} 与真值 {truth.shape} 的边集不一致")
    mask = truth >= 0
    if np.any(predicted[mask] < 0):
        raise DataError("真值存在的边上缺少预测类型")
    if np.any(predicted[mask] >= n_types) or np.any(truth[mask] >= n_types):
        raise DataError(f"边类型超出 [0, {n_types})")
    w = np.zeros((n_types, n_types), dtype=np.int64)
    np.add.at(w, (predicted[mask], truth[mask]), 1)
    return w


def permutation_accuracy(predicted: np.ndarray, truth: np.ndarray, n_types: int) -> Tuple[float, Tuple[int, ...]]:
    """
    置换不变准确率。

    Args:
        predicted (np.ndarray): 推断的边类型，形状任意，-1 表示无边。
        truth (np.ndarray): 同形状的真值类型，-1 处不参与统计。
        n_types (int): 类型数 K，不超过 6。

    Returns:
        tuple: (准确率, perm)。perm[预测类型] = 真值类型；并列时取字典序最小的置换。
    """
    if n_types > MAX_PERMUTATION_TYPES:
        raise CapacityError(f"K={n_types} 时需要枚举 {n_types}! 个置换，上限为 K={MAX_PERMUTATION_TYPES}")
    w = confusion_matrix(predicted, truth, n_types)
    total = int(w.sum())
    if total == 0:
        raise DataError("没有带真值类型的边，无法计算准确率")
    best, best_perm = -1, None
    rows = np.arange(n_types)
    for perm in itertools.permutations(range(n_types)):
        hits = int(w[rows, list(perm)].sum())
        if hits > best:
            best, best_perm = hits, perm
    return best / total, best_perm


def disagreement_rate(edge_types: np.ndarray) -> Optional[float]:
    """e_ij 与 e_ji 都有推断类型的无序节点对中，两者类型不同的比例。"""
    t = np.asarray(edge_types)
    upper = np.triu(np.ones(t.shape[-2:], dtype=bool), k=1)
    both = (t >= 0) & (np.swapaxes(t, -1, -2) >= 0) & upper
    if not np.any(both):
        return None
    return float(np.mean(t[both] != np.swapaxes(t, -1, -2)[both]))


# ==============================================================================
# 2. 力与增量误差
# ==============================================================================

def _require_force_decoder(bank: EdgeModelBank, dataset: TrajectoryDataset) -> None:
    if bank.kind is not DecoderKind.PHYSICS_INDUCED:
        raise UnsupportedMetricError("消息传递解码器不输出成对力")
    if dataset.kind == SystemKind.VAR.value:
        raise UnsupportedMetricError("VAR 序列没有成对力")


def reference_forces(dataset: TrajectoryDataset) -> ReferenceForce:
    """按数据集的系统定义构造参考成对力：解析系统用解析力，teacher 数据用重建的 teacher 网络。"""
    system = dataset.system or {}
    kind = system.get("kind", dataset.kind)
    if kind in (SystemKind.SPRING.value, SystemKind.CHARGE.value, SystemKind.CRYSTALLIZATION.value):
        spec = ParticleSystemSpec.from_dict(system)
        d = spec.dims
        return lambda types, xi, xj: pairwise_forces(spec, types, xi[:, :d], xj[:, :d])
    if kind == SystemKind.TEACHER.value and system.get("teacher_seed") is not None:
        oracle = teacher_bank(system["n_types"], system["hidden"], 1.0, system["teacher_seed"], dataset.dims)
        return lambda types, xi, xj: typed_edge_outputs(oracle, np.concatenate([xi, xj], axis=-1), types)
    raise UnsupportedMetricError(f"数据集 ({kind}) 没有可用的参考成对力")


def typed_edge_outputs(bank: EdgeModelBank, inputs: np.ndarray, types: np.ndarray) -> np.ndarray:
    """inputs (E, 2F) 的每条边用各自类型的边网络求值，返回 (E, w)。"""
    out = np.zeros((inputs.shape[0], bank.message_width))
    for k in np.unique(types):
        sel = types == k
        out[sel] = mlp.forward(bank.edge_spec, bank.edge_params[int(k)], inputs[sel])
    return out


@dataclass
class _EdgeSample:
    inputs: np.ndarray         # (E, 2F)
    truth: np.ndarray          # (E,)
    reverse_truth: np.ndarray  # (E,)，e_ji 的真值类型


def _edge_samples(dataset: TrajectoryDataset, n_types: int) -> Iterator[_EdgeSample]:
    """逐模拟给出全部活跃有向边 (t, i, j) 的输入与真值类型。"""
    if dataset.edge_types is None:
        raise DataError("数据集不含真值边类型")
    step_nb = InteractionGraph.from_dataset(dataset, n_types).step_neighbor_array(dataset.n_steps)
    features = dataset.node_features()
    T, N = dataset.n_steps, dataset.n_nodes
    receivers = np.broadcast_to(np.arange(N)[None, :, None], step_nb.shape[1:])
    for s in range(dataset.n_sims):
        nb = step_nb[s]
        inputs = generative.edge_inputs(features[s:s + 1], nb[None])[0]
        et = dataset.edge_types[s].astype(np.int64)
        yield _EdgeSample(
            inputs.reshape(-1, inputs.shape[-1]),
            et[receivers, nb].reshape(-1),
            et[nb, receivers].reshape(-1),
        )


def mae_ef(
    bank: EdgeModelBank,
    dataset: TrajectoryDataset,
    permutation: Sequence[int],
    reference: Optional[ReferenceForce] = None,
) -> float:
    """
    真值类型为 k 的边用边网络 NN^{α^{-1}(k)} 预测成对力，与参考力逐分量比较。

    Args:
        permutation: `permutation_accuracy` 返回的 perm（perm[预测] = 真值）。
        reference: 参考力；缺省时由 `reference_forces(dataset)` 构造。
    """
    _require_force_decoder(bank, dataset)
    reference = reference_forces(dataset) if reference is None else reference
    inverse = np.argsort(np.asarray(permutation))
    F = bank.node_width
    total, count = 0.0, 0
    for sample in _edge_samples(dataset, bank.n_types):
        mask = sample.truth >= 0
        x, k = sample.inputs[mask], sample.truth[mask]
        predicted = typed_edge_outputs(bank, x, inverse[k])
        expected = reference(k, x[:, :F], x[:, F:])
        total += float(np.abs(predicted - expected).sum())
        count += predicted.size
    if count == 0:
        raise DataError("没有带真值类型的边，无法计算 MAE_ef")
    return total / count


def mae_symm(bank: EdgeModelBank, dataset: TrajectoryDataset, permutation: Sequence[int]) -> float:
    """mean over e_ij of Σ_d |f̂_ij + f̂_ji| / d，两个方向各用自己真值类型对应的网络。"""
    _require_force_decoder(bank, dataset)
    inverse = np.argsort(np.asarray(permutation))
    F = bank.node_width
    total, count = 0.0, 0
    for sample in _edge_samples(dataset, bank.n_types):
        mask = (sample.truth >= 0) & (sample.reverse_truth >= 0)
        x = sample.inputs[mask]
        x_rev = np.concatenate([x[:, F:], x[:, :F]], axis=-1)
        f_ij = typed_edge_outputs(bank, x, inverse[sample.truth[mask]])
        f_ji = typed_edge_outputs(bank, x_rev, inverse[sample.reverse_truth[mask]])
        total += float(np.abs(f_ij + f_ji).sum())
        count += f_ij.size
    if count == 0:
        raise DataError("没有双向都有真值类型的边，无法计算 MAE_symm")
    return total / count


def _typed_neighbors(edge_types: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """按邻居表取出每条边的推断类型，无类型的边按类型 0 处理。"""
    if neighbors.ndim == 4:
        S, T, N, n = neighbors.shape
        full = np.broadcast_to(edge_types[:, None], (S, T) + edge_types.shape[1:])
        types = np.take_along_axis(full, neighbors, axis=3)
    else:
        types = np.take_along_axis(edge_types, neighbors, axis=2)
    return np.where(types < 0, 0, types)


def mae_increment(bank: EdgeModelBank, edge_types: np.ndarray, dataset: TrajectoryDataset) -> float:
    """推断类型下的预测增量与真实增量逐分量的平均绝对误差。"""
    step_nb = InteractionGraph.from_dataset(dataset, bank.n_types).step_neighbor_array(dataset.n_steps)
    features = dataset.node_features()
    total = 0.0
    for s in range(dataset.n_sims):
        nb = step_nb[s:s + 1]
        feats = features[s:s + 1]
        outputs = generative.edge_outputs(bank, generative.edge_inputs(feats, nb))
        types = _typed_neighbors(edge_types[s:s + 1].astype(np.int64), nb)
        pred = generative.increments_for_types(bank, outputs, types, feats, dataset.masses[s:s + 1])
        total += float(np.abs(pred - dataset.increments[s:s + 1]).sum())
    return total / dataset.increments.size


# ==============================================================================
# 3. 滚动预测误差
# ==============================================================================

@dataclass(frozen=True)
class RolloutResult:
    mae: float
    diverged: bool
    n_starts: int


def rollout_starts(frame_index: np.ndarray, horizon: int) -> np.ndarray:
    """帧 t .. t+h 在原始模拟中连续的起点 t。"""
    fi = np.asarray(frame_index, dtype=np.int64)
    if horizon < 1:
        raise UnsupportedMetricError(f"滚动步长必须为正，收到 {horizon}")
    if fi.size <= horizon:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(fi[horizon:] - fi[:-horizon] == horizon)


def rollout_mae_state(
    bank: EdgeModelBank, edge_types: np.ndarray, dataset: TrajectoryDataset, horizon: int
) -> RolloutResult:
    """
    从每个可用起点出发，用推断的有向边类型把预测增量滚动 h 帧。

    粒子系统使用与模拟器相同的半隐式欧拉格式：降采样的数据集每帧走
    system["downsample"] 个步长为 system["dt"] 的积分步，演化拓扑的数据集
    每个积分步按预测位置重算 n 近邻。VAR 序列直接累加增量。
    发散（非有限或坐标超过阈值）时返回 mae = +inf 并置 diverged。
    """
    starts = rollout_starts(dataset.frame_index, horizon)
    if starts.size == 0:
        logger.warning("没有长度为 %d 的连续帧窗口，MAE_state 无法计算", horizon)
        return RolloutResult(float("nan"), False, 0)
    S, N, d = dataset.n_sims, dataset.n_nodes, dataset.dims
    B = S * starts.size
    r = dataset.positions[:, starts].reshape(B, N, d)
    v = dataset.velocities[:, starts].reshape(B, N, d)
    masses = np.repeat(dataset.masses, starts.size, axis=0)
    types = np.repeat(np.asarray(edge_types, dtype=np.int64), starts.size, axis=0)
    n_knn = None if dataset.neighbors is None else dataset.neighbors.shape[-1]
    static_nb = None
    if n_knn is None:
        static_nb = np.broadcast_to(InteractionGraph.all_pairs(N, bank.n_types).neighbor_array(), (B, N, N - 1))
    series = dataset.feature_layout == "value"
    substeps, step_dt = _integration_steps(dataset)

    for _ in range(horizon * substeps):
        nb = knn_neighbors(r[:, None], n_knn)[:, 0] if n_knn else static_nb
        feats = build_features(dataset.feature_layout, r[:, None], v[:, None], masses)
        outputs = generative.edge_outputs(bank, generative.edge_inputs(feats, nb))
        inc = generative.increments_for_types(bank, outputs, _typed_neighbors(types, nb), feats, masses)[:, 0]
        if series:
            r = r + inc
        else:
            v = v + step_dt * inc
            r = r + step_dt * v
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(v))) or np.max(np.abs(r)) > DIVERGENCE_LIMIT:
            logger.warning("滚动预测在 h=%d 内发散", horizon)
            return RolloutResult(float("inf"), True, int(starts.size))

    err = np.abs(r - dataset.positions[:, starts + horizon].reshape(B, N, d))
    if not series:
        err = np.concatenate([err, np.abs(v - dataset.velocities[:, starts + horizon].reshape(B, N, d))], axis=-1)
    return RolloutResult(float(err.mean()), False, int(starts.size))


def _integration_steps(dataset: TrajectoryDataset) -> Tuple[int, float]:
    """(每帧积分步数, 积分步长)。system 中没有记录时按每帧一步、步长为帧间隔处理。"""
    if dataset.feature_layout == "value":
        return 1, dataset.dt
    system = dataset.system or {}
    substeps = int(system.get("downsample", 1))
    if substeps < 1:
        raise DataError(f"数据集记录的降采样因子 {substeps} 不是正数")
    step_dt = float(system["dt"]) if "dt" in system else dataset.dt / substeps
    return substeps, step_dt


# ==============================================================================
# 4. 报告
# ==============================================================================

def build_report(
    bank: EdgeModelBank,
    edge_types: np.ndarray,
    dataset: TrajectoryDataset,
    method: str,
    horizons: Sequence[int] = (1, 10),
    reference: Optional[ReferenceForce] = None,
) -> EvaluationReport:
    """计算全部适用的指标；不适用的记为 null 并写明原因。"""
    reasons: Dict[str, str] = {}
    report = EvaluationReport(
        method=method,
        decoder=bank.kind.value,
        dataset_kind=dataset.kind,
        n_sims=dataset.n_sims,
        n_steps=dataset.n_steps,
        n_edges=int(np.sum(np.asarray(edge_types) >= 0)),
        disagreement_rate=disagreement_rate(edge_types),
        mae_increment=mae_increment(bank, edge_types, dataset),
    )
    if report.disagreement_rate is None:
        reasons["disagreement_rate"] = "没有双向都有推断类型的节点对"

    if dataset.edge_types is None:
        for name in ("accuracy", "mae_ef", "mae_symm"):
            reasons[name] = "数据集不含真值边类型"
    else:
        # 只在推断过类型的边上比较（演化拓扑下从未活跃的边没有推断）
        truth = np.where(np.asarray(edge_types) >= 0, dataset.edge_types, -1)
        acc, perm = permutation_accuracy(edge_types, truth, bank.n_types)
        report.accuracy, report.permutation = acc, list(perm)
        for name, metric in (
            ("mae_ef", lambda: mae_ef(bank, dataset, perm, reference)),
            ("mae_symm", lambda: mae_symm(bank, dataset, perm)),
        ):
            try:
                setattr(report, name, metric())
            except UnsupportedMetricError as exc:
                reasons[name] = str(exc)

    for h in horizons:
        result = rollout_mae_state(bank, edge_types, dataset, h)
        key = str(h)
        report.mae_state[key] = None if not np.isfinite(result.mae) else result.mae
        report.rollout_starts[key] = result.n_starts
        report.diverged[key] = result.diverged
        if result.n_starts == 0:
            reasons[f"mae_state_{key}"] = f"没有长度为 {h} 的连续帧窗口"
        elif result.diverged:
            reasons[f"mae_state_{key}"] = "滚动预测发散 (+inf)"
    report.null_reasons = reasons
    return report


def edge_frame(edge_types: np.ndarray, truth: Optional[np.ndarray], permutation: Optional[Sequence[int]]) -> pd.DataFrame:
    """每条有推断类型的有向边一行：sim, receiver, sender, predicted, mapped, truth, correct。"""
    s, i, j = np.nonzero(np.asarray(edge_types) >= 0)
    predicted = np.asarray(edge_types)[s, i, j]
    frame = pd.DataFrame({"sim": s, "receiver": i, "sender": j, "predicted": predicted})
    if truth is not None and permutation is not None:
        mapped = np.asarray(permutation)[predicted]
        frame["mapped"] = mapped
        frame["truth"] = np.asarray(truth)[s, i, j]
        frame["correct"] = (mapped == frame["truth"].to_numpy()) & (frame["truth"].to_numpy() >= 0)
    return frame


def _flatten(report: EvaluationReport) -> Dict[str, float]:
    row = {
        "accuracy": report.accuracy,
        "disagreement_rate": report.disagreement_rate,
        "mae_ef": report.mae_ef,
        "mae_symm": report.mae_symm,
        "mae_increment": report.mae_increment,
    }
    for h, value in report.mae_state.items():
        row[f"mae_state_{h}"] = value
    return {k: (np.nan if v is None else float(v)) for k, v in row.items()}


def aggregate_reports(reports: List[EvaluationReport]) -> pd.DataFrame:
    """多个种子的报告按指标取均值与标准差（样本标准差），缺失值不参与统计。"""
    if not reports:
        raise DataError("没有可汇总的评估报告")
    frame = pd.DataFrame([_flatten(r) for r in reports])
    return frame.agg(["mean", "std"]).T.rename_axis("metric").reset_index()
