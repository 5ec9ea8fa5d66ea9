# app/data/storage.py

"""
================================================================================
 数据集文件格式 (app/data/storage.py)
================================================================================

一个数据集文件由一行 JSON 头和随后的若干二进制块组成（全部小端序）：

    {"dims": 2, "dt": 0.01, "kind": "spring", ...}\n      键按字母序排列
    positions     f64  (S, T, N, d)
    velocities    f64  (S, T, N, d)
    masses        f64  (S, N)
    increments    f64  (S, T, N, d)
    edge_types    i8   (S, N, N)        头中 has_edge_types 为 true 时存在
    neighbors     u32  (S, T, N, n)     头中 neighbor_count 非空时存在
    frame_index   u32  (T,)

同一数据集两次写出的字节完全相同。`export_block_csv` 把任意一块导出为 CSV。
"""
import json
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import pandas as pd

from app.data.dataset import TrajectoryDataset
from app.errors import ConfigError, DataError

FORMAT_TAG = "cri-trajectories"
FORMAT_VERSION = 1
BLOCKS = ("positions", "velocities", "masses", "increments", "edge_types", "neighbors", "frame_index")
_DTYPES = {
    "positions": "<f8", "velocities": "<f8", "masses": "<f8", "increments": "<f8",
    "edge_types": "<i1", "neighbors": "<u4", "frame_index": "<u4",
}


def _header(ds: TrajectoryDataset) -> Dict:
    return {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "kind": ds.kind,
        "dt": ds.dt,
        "seed": ds.seed,
        "split": ds.split,
        "n_sims": ds.n_sims,
        "n_steps": ds.n_steps,
        "n_nodes": ds.n_nodes,
        "dims": ds.dims,
        "feature_layout": ds.feature_layout,
        "has_edge_types": ds.edge_types is not None,
        "neighbor_count": None if ds.neighbors is None else int(ds.neighbors.shape[-1]),
        "system": ds.system,
    }


def _shapes(h: Dict) -> Dict[str, Tuple[int, ...]]:
    S, T, N, d = h["n_sims"], h["n_steps"], h["n_nodes"], h["dims"]
    shapes = {
        "positions": (S, T, N, d),
        "velocities": (S, T, N, d),
        "masses": (S, N),
        "increments": (S, T, N, d),
        "frame_index": (T,),
    }
    if h["has_edge_types"]:
        shapes["edge_types"] = (S, N, N)
    if h["neighbor_count"] is not None:
        shapes["neighbors"] = (S, T, N, h["neighbor_count"])
    return shapes


def dataset_bytes(ds: TrajectoryDataset) -> bytes:
    header = json.dumps(_header(ds), sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    shapes = _shapes(_header(ds))
    chunks = [header]
    for name in BLOCKS:
        if name in shapes:
            chunks.append(np.ascontiguousarray(getattr(ds, name), dtype=_DTYPES[name]).tobytes())
    return b"".join(chunks)


def save_dataset(ds: TrajectoryDataset, path: Path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(dataset_bytes(ds))
    except OSError as exc:
        raise ConfigError(f"无法写入数据集文件 {path}: {exc}") from exc


def load_dataset(path: Path) -> TrajectoryDataset:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"无法读取数据集文件 {path}: {exc}") from exc
    newline = blob.find(b"\n")
    if newline < 0:
        raise DataError(f"{path} 缺少 JSON 头")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path} 的 JSON 头无法解析: {exc}") from exc
    if header.get("format") != FORMAT_TAG or header.get("version") != FORMAT_VERSION:
        raise DataError(f"{path} 不是版本 {FORMAT_VERSION} 的 {FORMAT_TAG} 文件")

    offset = newline + 1
    arrays = {}
    for name in BLOCKS:
        shapes = _shapes(header)
        if name not in shapes:
            continue
        dtype = np.dtype(_DTYPES[name])
        count = int(np.prod(shapes[name]))
        end = offset + count * dtype.itemsize
        if end > len(blob):
            raise DataError(f"{path} 的 {name} 块被截断")
        arrays[name] = np.frombuffer(blob[offset:end], dtype=dtype).reshape(shapes[name])
        offset = end
    if offset != len(blob):
        raise DataError(f"{path} 末尾有 {len(blob) - offset} 个多余字节")

    return TrajectoryDataset(
        kind=header["kind"],
        dt=header["dt"],
        positions=arrays["positions"].astype(np.float64),
        velocities=arrays["velocities"].astype(np.float64),
        masses=arrays["masses"].astype(np.float64),
        increments=arrays["increments"].astype(np.float64),
        edge_types=arrays["edge_types"].astype(np.int8) if "edge_types" in arrays else None,
        neighbors=arrays["neighbors"].astype(np.int64) if "neighbors" in arrays else None,
        frame_index=arrays["frame_index"].astype(np.int64),
        feature_layout=header["feature_layout"],
        seed=header["seed"],
        split=header["split"],
        system=header["system"],
    )


_AXIS_NAMES = {4: ["sim", "step", "node", "component"], 3: ["sim", "receiver", "sender"], 2: ["sim", "node"], 1: ["step"]}


def block_frame(ds: TrajectoryDataset, block: str) -> pd.DataFrame:
    """把一块数组展开成长表：每个元素一行，下标列加一列 value。"""
    if block not in BLOCKS:
        raise ConfigError(f"未知的数据块 '{block}'，可选 {BLOCKS}")
    arr = getattr(ds, block)
    if arr is None:
        raise DataError(f"数据集中没有 {block} 块")
    names = list(_AXIS_NAMES[arr.ndim])
    if block == "neighbors":
        names = ["sim", "step", "node", "slot"]
    index = pd.MultiIndex.from_product([range(n) for n in arr.shape], names=names)
    return pd.DataFrame({"value": arr.reshape(-1)}, index=index).reset_index()


def export_block_csv(ds: TrajectoryDataset, block: str, path: Path) -> None:
    block_frame(ds, block).to_csv(path, index=False, float_format="%.17g")
