# app/decoder/forces.py

"""
================================================================================
 力场导出 (app/decoder/forces.py)
================================================================================

把接收粒子固定在原点、另一个粒子在方形网格上移动，逐类型求边网络输出，得到
可视化用的力场表（列: type, x, y, fx, fy）。两个粒子速度为零、质量为 1。
"""
from pathlib import Path

import numpy as np
import pandas as pd

from app.data.dataset import build_features
from app.decoder.bank import DecoderKind, EdgeModelBank
from app.errors import CapacityError, ConfigError, UnsupportedMetricError
from app.nn import mlp

MAX_GRID_POINTS = 1_000_000


def grid_points(extent: float, resolution: int) -> np.ndarray:
    """[-extent, extent]² 上 resolution × resolution 个点，形状 (P, 2)，x 变化最快。"""
    if extent <= 0 or resolution < 1:
        raise ConfigError(f"网格范围与分辨率必须为正，收到 extent={extent}, resolution={resolution}")
    if resolution * resolution > MAX_GRID_POINTS:
        raise CapacityError(f"网格共 {resolution * resolution} 个点，超过上限 {MAX_GRID_POINTS}")
    axis = np.linspace(-extent, extent, resolution)
    ys, xs = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)


def force_field(bank: EdgeModelBank, points: np.ndarray, feature_layout: str) -> pd.DataFrame:
    """每个类型、每个网格点一行，行数 = 点数 × K。"""
    if bank.kind is not DecoderKind.PHYSICS_INDUCED:
        raise UnsupportedMetricError("消息传递解码器的边输出是消息而不是力，无法导出力场")
    if bank.dims != 2 or points.shape[-1] != 2:
        raise ConfigError("力场导出只支持二维系统")
    P = points.shape[0]
    positions = np.zeros((1, 1, P + 1, 2))
    positions[0, 0, 1:] = points
    feats = build_features(feature_layout, positions, np.zeros_like(positions), np.ones((1, P + 1)))[0, 0]
    if feats.shape[-1] != bank.node_width:
        raise ConfigError(f"特征布局 {feature_layout} 的宽度 {feats.shape[-1]} 与边网络 {bank.node_width} 不符")
    inputs = np.concatenate([np.broadcast_to(feats[0], (P, feats.shape[-1])), feats[1:]], axis=-1)
    frames = []
    for k, params in enumerate(bank.edge_params):
        f = mlp.forward(bank.edge_spec, params, inputs)
        frames.append(pd.DataFrame({"type": k, "x": points[:, 0], "y": points[:, 1], "fx": f[:, 0], "fy": f[:, 1]}))
    return pd.concat(frames, ignore_index=True)


def export_force_field(bank: EdgeModelBank, path: Path, extent: float, resolution: int, feature_layout: str) -> int:
    """写出力场 CSV，返回行数。"""
    frame = force_field(bank, grid_points(extent, resolution), feature_layout)
    frame.to_csv(path, index=False, float_format="%.17g")
    return len(frame)
