# app/decoder/generative.py

"""
================================================================================
 生成模块 (app/decoder/generative.py)
================================================================================

模块功能:
给定节点状态与边类型（或子图实现），预测状态增量 ẍ_i^t，并在以预测值为中心、
方差为 σ²I 的高斯分布下给真实增量打分。

本文件提供两套接口：

1. 单节点接口 `predict_increment` / `predict_increment_evolving` /
   `conditional_log_likelihood`：逐条边调用 MLP，便于核对和小规模使用。
2. 批量接口：推断算法在 (S, T, N, n) 的全部边上一次性求值。流程为

       edge_inputs      ->  (S, T, N, n, 2F)        拼接 [x_i, x_j]
       edge_outputs     ->  (S, T, N, n, K, w)      每条边在 K 个网络下的输出
       combine          ->  (S, T, N, Z, d)         每个实现 z 下的预测增量

   `combine_vjp` 与 `edge_outputs_vjp` 是对应的反向传播。
   `combine` 只依赖 one_hot (Z, n, K)，因此同一套函数也用于 Var-CRI 的分组
   增量（组外的槽位在 one_hot 中全为零）。
"""
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.decoder.bank import DecoderKind, EdgeModelBank
from app.errors import ConfigError, ShapeError
from app.graph.realizations import RealizationTable
from app.nn import mlp

LOG_2PI = float(np.log(2.0 * np.pi))


# ==============================================================================
# 1. 单节点接口
# ==============================================================================

def predict_increment_evolving(
    bank: EdgeModelBank,
    edge_types: Sequence[int],
    features: np.ndarray,
    masses: np.ndarray,
    center: int,
    active: Sequence[int],
) -> np.ndarray:
    """
    只对活跃邻居 Γ^t(i) 求和的增量预测。

    Args:
        bank (EdgeModelBank): 边网络库。
        edge_types: 与 `active` 一一对应的边类型。
        features (np.ndarray): t 时刻全部节点特征 (N, F)。
        masses (np.ndarray): 节点质量 (N,)。
        center (int): 接收节点 i。
        active: 活跃邻居下标。

    Returns:
        np.ndarray: 长度为 d 的预测增量。
    """
    if len(edge_types) != len(active):
        raise ShapeError(f"边类型个数 {len(edge_types)} 与活跃邻居个数 {len(active)} 不符")
    if bank.kind is DecoderKind.MESSAGE_PASSING:
        bank.require_node_network()
    x_i = np.asarray(features[center], dtype=np.float64)
    agg = np.zeros(bank.message_width)
    for j, k in zip(active, edge_types):
        if not 0 <= int(k) < bank.n_types:
            raise ConfigError(f"边 e_({center},{j}) 的类型 {k} 超出 [0, {bank.n_types})")
        agg += mlp.forward(bank.edge_spec, bank.edge_params[int(k)], np.concatenate([x_i, features[j]]))
    if bank.kind is DecoderKind.PHYSICS_INDUCED:
        return agg / masses[center]
    return mlp.forward(bank.node_spec, bank.node_params, np.concatenate([agg, x_i]))


def predict_increment(
    bank: EdgeModelBank,
    table: RealizationTable,
    features: np.ndarray,
    masses: np.ndarray,
    center: int,
    neighbors: Sequence[int],
    z: int,
) -> np.ndarray:
    """子图 S_(i) 取实现 z 时的预测增量；neighbors 按升序给出 Γ(i)。"""
    if len(neighbors) != table.n_slots:
        raise ShapeError(f"邻居个数 {len(neighbors)} 与实现表槽位数 {table.n_slots} 不符")
    if not 0 <= z < table.size:
        raise ConfigError(f"实现编号 z={z} 超出 [0, {table.size})")
    return predict_increment_evolving(bank, table.digits[z], features, masses, center, neighbors)


def gaussian_log_likelihood(sigma2: float, truth: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    """沿最后一维求 ln N(truth | predicted, σ²I)，其余维度按广播规则保留。"""
    if sigma2 <= 0:
        raise ConfigError(f"高斯方差 σ² 必须为正，收到 {sigma2}")
    diff = truth - predicted
    d = diff.shape[-1]
    return -np.sum(diff * diff, axis=-1) / (2.0 * sigma2) - 0.5 * d * LOG_2PI - 0.5 * d * np.log(sigma2)


def conditional_log_likelihood(bank: EdgeModelBank, truth: np.ndarray, predicted: np.ndarray) -> float:
    truth = np.asarray(truth, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if truth.shape != predicted.shape or truth.ndim != 1:
        raise ShapeError(f"真实增量 {truth.shape} 与预测增量 {predicted.shape} 必须是等长向量")
    return float(gaussian_log_likelihood(bank.sigma2, truth, predicted))


# ==============================================================================
# 2. 批量接口
# ==============================================================================

def edge_inputs(features: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """
    Args:
        features (np.ndarray): (S, T, N, F) 节点特征。
        neighbors (np.ndarray): (S, N, n) 静态或 (S, T, N, n) 逐帧邻居表。

    Returns:
        np.ndarray: (S, T, N, n, 2F)，最后一维为 [x_i, x_j]。
    """
    S, T, N, F = features.shape
    if neighbors.ndim == 3:
        neighbors = np.broadcast_to(neighbors[:, None], (S, T) + neighbors.shape[1:])
    if neighbors.shape[:3] != (S, T, N):
        raise ShapeError(f"邻居表形状 {neighbors.shape} 与特征形状 {features.shape} 不符")
    s_idx = np.arange(S)[:, None, None, None]
    t_idx = np.arange(T)[None, :, None, None]
    x_j = features[s_idx, t_idx, neighbors]
    x_i = np.broadcast_to(features[:, :, :, None, :], x_j.shape)
    return np.concatenate([x_i, x_j], axis=-1)


def edge_outputs(bank: EdgeModelBank, inputs: np.ndarray) -> np.ndarray:
    """每条边在全部 K 个边网络下的输出，形状 (..., K, w)。"""
    return np.stack([mlp.forward(bank.edge_spec, p, inputs) for p in bank.edge_params], axis=-2)


def combine(
    bank: EdgeModelBank,
    outputs: np.ndarray,
    one_hot: np.ndarray,
    features: np.ndarray,
    masses: np.ndarray,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    按实现聚合边输出。

    Args:
        outputs (np.ndarray): (S, T, N, n, K, w) 边输出。
        one_hot (np.ndarray): (Z, n, K) 实现的独热编码。
        features (np.ndarray): (S, T, N, F) 节点特征（消息传递解码器使用）。
        masses (np.ndarray): (S, N) 质量（物理诱导解码器使用）。

    Returns:
        tuple: (预测增量 (S, T, N, Z, d), 节点网络输入或 None)。第二项供 `combine_vjp` 复用。
    """
    agg = np.einsum("stinkw,znk->stizw", outputs, one_hot)
    if bank.kind is DecoderKind.PHYSICS_INDUCED:
        return agg / masses[:, None, :, None, None], None
    bank.require_node_network()
    x_i = np.broadcast_to(features[:, :, :, None, :], agg.shape[:-1] + (features.shape[-1],))
    node_in = np.concatenate([agg, x_i], axis=-1)
    return mlp.forward(bank.node_spec, bank.node_params, node_in), node_in


def combine_vjp(
    bank: EdgeModelBank,
    upstream: np.ndarray,
    one_hot: np.ndarray,
    masses: np.ndarray,
    node_inputs: Optional[np.ndarray],
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """`combine` 的反向：返回 (边输出的梯度 (S, T, N, n, K, w), 节点网络参数梯度或 None)。"""
    node_grad = None
    if bank.kind is DecoderKind.PHYSICS_INDUCED:
        g_agg = upstream / masses[:, None, :, None, None]
    else:
        node_grad, g_in = mlp.gradient(bank.node_spec, bank.node_params, node_inputs, upstream)
        g_agg = g_in[..., : bank.message_width]
    return np.einsum("stizw,znk->stinkw", g_agg, one_hot), node_grad


def edge_outputs_vjp(bank: EdgeModelBank, inputs: np.ndarray, grad_outputs: np.ndarray) -> List[np.ndarray]:
    """`edge_outputs` 的反向：K 个边网络各自的参数梯度。"""
    return [
        mlp.gradient(bank.edge_spec, p, inputs, grad_outputs[..., k, :])[0]
        for k, p in enumerate(bank.edge_params)
    ]


def increments_for_types(
    bank: EdgeModelBank,
    outputs: np.ndarray,
    edge_types: np.ndarray,
    features: np.ndarray,
    masses: np.ndarray,
) -> np.ndarray:
    """
    每条边取给定类型时的预测增量。

    Args:
        outputs (np.ndarray): (S, T, N, n, K, w) 边输出。
        edge_types (np.ndarray): (S, N, n) 或 (S, T, N, n) 非负类型。
        features (np.ndarray): (S, T, N, F)。
        masses (np.ndarray): (S, N)。

    Returns:
        np.ndarray: (S, T, N, d)。
    """
    if edge_types.ndim == 3:
        edge_types = edge_types[:, None]
    index = np.broadcast_to(edge_types, outputs.shape[:4])[..., None, None]
    selected = np.take_along_axis(outputs, index, axis=4)[..., 0, :]
    agg = selected.sum(axis=3)
    if bank.kind is DecoderKind.PHYSICS_INDUCED:
        return agg / masses[:, None, :, None]
    bank.require_node_network()
    return mlp.forward(bank.node_spec, bank.node_params, np.concatenate([agg, features], axis=-1))
