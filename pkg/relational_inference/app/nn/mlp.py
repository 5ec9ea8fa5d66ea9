# app/nn/mlp.py

"""
================================================================================
 全连接网络引擎 (app/nn/mlp.py)
================================================================================

模块功能:
本模块是 K 个边网络 NN^1..NN^K 以及节点网络 NN_node 的计算核心。它只做三件事：
前向计算、向量-雅可比积（反向梯度）和参数初始化。不保留任何计算图，每次调用
都从参数向量重新展开，因此所有函数都是纯函数，可以在任意线程中调用。

参数布局 (ParameterVector):
所有权重和偏置被压平成一个 float64 一维数组，顺序固定为“逐层、先权重后偏置”：

    [W_0 (w_0 x w_1, 行主序), b_0 (w_1), W_1 (w_1 x w_2), b_1 (w_2), ...]

第 l 层计算 a_l = h_l @ W_l + b_l。隐藏层之后施加激活函数，输出层为恒等映射。
检查点文件直接保存这个数组，因此这一顺序是对外约定，不得随意修改。

批量约定:
`forward` 与 `gradient` 同时接受单个向量 (w_0,) 和批量矩阵 (..., w_0)。
批量时 `gradient` 返回的参数梯度是对整个批量求和的结果。
"""
from dataclasses import dataclass
from enum import Enum
from typing import List, Tuple

import numpy as np

from app.errors import ConfigError, ShapeError


class Activation(str, Enum):
    TANH = "tanh"
    RELU = "relu"


ACTIVATION_TAGS = {Activation.TANH: 0, Activation.RELU: 1}


@dataclass(frozen=True)
class MlpSpec:
    """网络结构：各层宽度（含输入与输出）以及隐藏层激活函数。"""

    layer_widths: Tuple[int, ...]
    activation: Activation = Activation.TANH

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2:
            raise ConfigError(f"MLP 至少需要输入和输出两层宽度，收到 {widths}")
        if any(w < 1 for w in widths):
            raise ConfigError(f"MLP 各层宽度必须为正整数，收到 {widths}")
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def input_width(self) -> int:
        return self.layer_widths[0]

    @property
    def output_width(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[l] * w[l + 1] + w[l + 1] for l in range(len(w) - 1))


def _unpack(spec: MlpSpec, params: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise ShapeError(
            f"参数向量长度 {params.shape} 与网络结构 {spec.layer_widths} 需要的 {spec.n_params} 不符"
        )
    layers = []
    offset = 0
    w = spec.layer_widths
    for l in range(len(w) - 1):
        n_w = w[l] * w[l + 1]
        weight = params[offset:offset + n_w].reshape(w[l], w[l + 1])
        offset += n_w
        bias = params[offset:offset + w[l + 1]]
        offset += w[l + 1]
        layers.append((weight, bias))
    return layers


def _activate(spec: MlpSpec, a: np.ndarray) -> np.ndarray:
    if spec.activation is Activation.TANH:
        return np.tanh(a)
    return np.maximum(a, 0.0)


def _activate_grad(spec: MlpSpec, a: np.ndarray, h: np.ndarray) -> np.ndarray:
    # h 为激活后的值；tanh 的导数直接由 h 给出
    if spec.activation is Activation.TANH:
        return 1.0 - h * h
    return (a > 0.0).astype(np.float64)


def _check_input(spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != spec.input_width:
        raise ShapeError(f"输入最后一维应为 {spec.input_width}，收到形状 {x.shape}")
    return x


def forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """
    前向计算。

    Args:
        spec (MlpSpec): 网络结构。
        params (np.ndarray): 压平的参数向量。
        x (np.ndarray): 形状 (..., w_0) 的输入。

    Returns:
        np.ndarray: 形状 (..., w_L) 的输出。
    """
    h = _check_input(spec, x)
    layers = _unpack(spec, params)
    for l, (weight, bias) in enumerate(layers):
        a = h @ weight + bias
        h = a if l == len(layers) - 1 else _activate(spec, a)
    return h


def gradient(
    spec: MlpSpec, params: np.ndarray, x: np.ndarray, upstream: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    反向模式的向量-雅可比积。

    Args:
        spec (MlpSpec): 网络结构。
        params (np.ndarray): 压平的参数向量。
        x (np.ndarray): 形状 (..., w_0) 的输入。
        upstream (np.ndarray): 形状 (..., w_L) 的上游余切向量，与输出一一对应。

    Returns:
        tuple: (param_grad, input_grad)。param_grad 与 params 同形，是 upstream
               与 ∂output/∂params 的乘积在批量维度上的总和；input_grad 与 x 同形。
    """
    x = _check_input(spec, x)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != x.shape[:-1] + (spec.output_width,):
        raise ShapeError(
            f"上游梯度形状 {upstream.shape} 与输出形状 {x.shape[:-1] + (spec.output_width,)} 不符"
        )
    layers = _unpack(spec, params)
    batch_shape = x.shape[:-1]
    h = x.reshape(-1, spec.input_width)
    hs, pre = [h], []
    for l, (weight, bias) in enumerate(layers):
        a = h @ weight + bias
        pre.append(a)
        h = a if l == len(layers) - 1 else _activate(spec, a)
        hs.append(h)

    grads = []
    delta = upstream.reshape(-1, spec.output_width)
    for l in range(len(layers) - 1, -1, -1):
        weight, _ = layers[l]
        if l != len(layers) - 1:
            delta = delta * _activate_grad(spec, pre[l], hs[l + 1])
        grads.append(delta.sum(axis=0))
        grads.append((hs[l].T @ delta).ravel())
        delta = delta @ weight.T
    param_grad = np.concatenate(grads[::-1])
    return param_grad, delta.reshape(batch_shape + (spec.input_width,))


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot 均匀初始化权重，偏置为零。"""
    w = spec.layer_widths
    chunks = []
    for l in range(len(w) - 1):
        limit = np.sqrt(6.0 / (w[l] + w[l + 1]))
        chunks.append(rng.uniform(-limit, limit, size=w[l] * w[l + 1]))
        chunks.append(np.zeros(w[l + 1]))
    return np.concatenate(chunks).astype(np.float64)
