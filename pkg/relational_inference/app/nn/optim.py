# app/nn/optim.py

"""
================================================================================
 Adam 优化器 (app/nn/optim.py)
================================================================================

每个网络持有一个独立的 `AdamState`。`adam_step` 是纯函数：返回新的参数向量和
新的状态，不修改传入的数组。给定的 `grad` 是待 *最小化* 目标的梯度；EM 的
M 步把 -Q 的梯度传进来，从而实现“对 Q 做一步梯度上升”。

`scale` 参数用于步长减半重试：同一组矩估计下，以 lr * scale 的步长重新计算
更新量，而不再次推进状态。
"""
from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

from app.errors import NumericError, ShapeError


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n_params: int, lr: float = 0.001) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), step=0, lr=lr)


def adam_moments(grad: np.ndarray, state: AdamState) -> AdamState:
    """推进一阶、二阶矩估计与步数计数器。"""
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise NumericError(f"梯度在下标 {int(bad[0])} 处不是有限数: {grad[bad[0]]!r}")
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    return replace(state, m=m, v=v, step=state.step + 1)


def adam_update(params: np.ndarray, state: AdamState, scale: float = 1.0) -> np.ndarray:
    """按已推进的矩估计计算带偏差修正的新参数。"""
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    m_hat = state.m / bc1
    v_hat = state.v / bc2
    return params - (state.lr * scale) * m_hat / (np.sqrt(v_hat) + state.eps)


def adam_step(
    params: np.ndarray, grad: np.ndarray, state: AdamState
) -> Tuple[np.ndarray, AdamState]:
    """
    标准 Adam 更新（含偏差修正）。

    Args:
        params (np.ndarray): 当前参数。
        grad (np.ndarray): 目标函数关于参数的梯度（下降方向取其负）。
        state (AdamState): 当前优化器状态。

    Returns:
        tuple: (新参数, 新状态)，新状态的 step 比旧状态大 1。
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if not (params.shape == grad.shape == state.m.shape == state.v.shape):
        raise ShapeError(
            f"参数 {params.shape}、梯度 {grad.shape} 与优化器状态 {state.m.shape} 长度不一致"
        )
    new_state = adam_moments(grad, state)
    return adam_update(params, new_state), new_state
