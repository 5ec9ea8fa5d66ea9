# app/decoder/bank.py

"""
================================================================================
 边网络库 (app/decoder/bank.py)
================================================================================

`EdgeModelBank` 保存 K 个结构相同、参数独立的边网络 NN^1..NN^K，以及消息传递
解码器所需的节点网络 NN_node。两种解码器：

- PHYSICS_INDUCED: 边网络输出成对力（宽度 d），增量 = Σ_j NN^{z_ij}(x_i, x_j) / m_i，
  没有节点网络。
- MESSAGE_PASSING: 边网络输出消息，增量 = NN_node(Σ_j NN^{z_ij}(x_i, x_j), x_i)。
  节点网络结构为 [消息宽度 + 节点特征宽度, 隐藏宽度, d]。
"""
from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from app.errors import ConfigError
from app.nn import mlp
from app.nn.mlp import Activation, MlpSpec


class DecoderKind(str, Enum):
    MESSAGE_PASSING = "message_passing"
    PHYSICS_INDUCED = "physics_induced"


@dataclass(frozen=True)
class EdgeModelBank:
    kind: DecoderKind
    edge_spec: MlpSpec
    edge_params: Tuple[np.ndarray, ...]
    sigma2: float
    node_spec: Optional[MlpSpec] = None
    node_params: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", DecoderKind(self.kind))
        object.__setattr__(self, "edge_params", tuple(np.asarray(p, dtype=np.float64) for p in self.edge_params))
        if not self.edge_params:
            raise ConfigError("边网络库至少需要一个边网络 (K >= 1)")
        if self.sigma2 <= 0:
            raise ConfigError(f"高斯方差 σ² 必须为正，收到 {self.sigma2}")
        if self.edge_spec.input_width % 2:
            raise ConfigError(f"边网络输入宽度 {self.edge_spec.input_width} 必须是节点特征宽度的两倍")
        if self.kind is DecoderKind.PHYSICS_INDUCED and self.node_spec is not None:
            raise ConfigError("physics_induced 解码器不使用节点网络")
        if self.node_spec is not None:
            expected = self.edge_spec.output_width + self.node_width
            if self.node_spec.input_width != expected:
                raise ConfigError(f"节点网络输入宽度 {self.node_spec.input_width} 应为 {expected}")

    @property
    def n_types(self) -> int:
        return len(self.edge_params)

    @property
    def node_width(self) -> int:
        return self.edge_spec.input_width // 2

    @property
    def message_width(self) -> int:
        return self.edge_spec.output_width

    @property
    def dims(self) -> int:
        if self.kind is DecoderKind.PHYSICS_INDUCED:
            return self.edge_spec.output_width
        self.require_node_network()
        return self.node_spec.output_width

    def require_node_network(self) -> None:
        if self.node_spec is None or self.node_params is None:
            raise ConfigError("message_passing 解码器缺少节点网络 NN_node")

    @classmethod
    def create(
        cls,
        kind: DecoderKind,
        edge_widths: List[int],
        n_types: int,
        sigma2: float,
        rng: np.random.Generator,
        activation: Activation = Activation.TANH,
        node_hidden: int = 256,
        dims: int = 2,
    ) -> "EdgeModelBank":
        """按给定结构随机初始化 K 个边网络（以及节点网络）。"""
        kind = DecoderKind(kind)
        edge_spec = MlpSpec(tuple(edge_widths), activation)
        if kind is DecoderKind.PHYSICS_INDUCED and edge_spec.output_width != dims:
            raise ConfigError(f"physics_induced 边网络输出宽度 {edge_spec.output_width} 必须等于维度 d={dims}")
        edge_params = tuple(mlp.init_params(edge_spec, rng) for _ in range(n_types))
        node_spec = node_params = None
        if kind is DecoderKind.MESSAGE_PASSING:
            node_spec = MlpSpec((edge_spec.output_width + edge_spec.input_width // 2, node_hidden, dims), activation)
            node_params = mlp.init_params(node_spec, rng)
        return cls(kind, edge_spec, edge_params, sigma2, node_spec, node_params)

    def networks(self) -> List[Tuple[MlpSpec, np.ndarray]]:
        """按 [NN^1, ..., NN^K, (NN_node)] 顺序列出所有网络。"""
        nets = [(self.edge_spec, p) for p in self.edge_params]
        if self.node_spec is not None:
            nets.append((self.node_spec, self.node_params))
        return nets

    def with_params(self, params: List[np.ndarray]) -> "EdgeModelBank":
        """按 `networks()` 的顺序替换全部参数。"""
        if len(params) != len(self.networks()):
            raise ConfigError(f"参数个数 {len(params)} 与网络个数 {len(self.networks())} 不符")
        node = params[self.n_types] if self.node_spec is not None else None
        return replace(self, edge_params=tuple(params[: self.n_types]), node_params=node)
