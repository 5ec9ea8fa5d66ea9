# app/inference/store.py

"""
================================================================================
 训练检查点目录 (app/inference/store.py)
================================================================================

一个检查点是一个目录，包含：

    config.json      完整实验配置（键按字母序）
    networks.bin     按 [NN^1..NN^K, (NN_node)] 顺序拼接的网络块（CRI1 格式）
    priors.json      方法、解码器、σ²、τ 或 ω、分组、轮数与最佳验证误差
    optimizer.bin    每个网络: u32 步数, f64 一阶矩, f64 二阶矩（小端序）
    history.csv      epoch, marginal_log_likelihood, q, valid_mae_state, accuracy

同一状态写出两次得到逐字节相同的目录内容。
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from app.config import ExperimentConfig, validate_config
from app.decoder.bank import DecoderKind, EdgeModelBank
from app.errors import ConfigError, DataError
from app.nn.checkpoint import dump_network, load_network
from app.nn.optim import AdamState

HISTORY_COLUMNS = ["epoch", "marginal_log_likelihood", "q", "valid_mae_state", "accuracy"]
FILES = ("config.json", "networks.bin", "priors.json", "optimizer.bin", "history.csv")

Priors = Union[np.ndarray, Dict[int, np.ndarray]]


@dataclass
class Checkpoint:
    config: ExperimentConfig
    bank: EdgeModelBank
    priors: Priors                       # τ；Var-CRI 为 {组大小: ω}
    adam: Tuple[AdamState, ...]
    epoch: int = 0
    best_epoch: int = 0
    best_valid_mae: float = float("inf")
    partition: Optional[List[List[int]]] = None
    history: List[Dict[str, float]] = field(default_factory=list)

    @property
    def method(self) -> str:
        return self.config.model.method

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=HISTORY_COLUMNS)


def _priors_to_json(priors: Priors):
    if isinstance(priors, dict):
        return {str(size): [float(x) for x in omega] for size, omega in sorted(priors.items())}
    return [float(x) for x in priors]


def _priors_from_json(data) -> Priors:
    if isinstance(data, dict):
        return {int(size): np.asarray(omega, dtype=np.float64) for size, omega in data.items()}
    return np.asarray(data, dtype=np.float64)


def _optimizer_bytes(adam: Tuple[AdamState, ...]) -> bytes:
    chunks = []
    for st in adam:
        chunks.append(struct.pack("<I", st.step))
        chunks.append(np.asarray(st.m, dtype="<f8").tobytes())
        chunks.append(np.asarray(st.v, dtype="<f8").tobytes())
    return b"".join(chunks)


def _optimizer_from_bytes(blob: bytes, sizes: List[int], lr: float) -> Tuple[AdamState, ...]:
    out, offset = [], 0
    for n in sizes:
        end = offset + 4 + 16 * n
        if end > len(blob):
            raise DataError("optimizer.bin 被截断")
        (step,) = struct.unpack_from("<I", blob, offset)
        m = np.frombuffer(blob, dtype="<f8", count=n, offset=offset + 4).astype(np.float64)
        v = np.frombuffer(blob, dtype="<f8", count=n, offset=offset + 4 + 8 * n).astype(np.float64)
        out.append(AdamState(m=m, v=v, step=step, lr=lr))
        offset = end
    if offset != len(blob):
        raise DataError(f"optimizer.bin 末尾有 {len(blob) - offset} 个多余字节")
    return tuple(out)


def save_checkpoint(ckpt: Checkpoint, directory: Path) -> Dict[str, Path]:
    """写出检查点目录，返回 {文件名: 路径}。"""
    directory = Path(directory)
    bank = ckpt.bank
    meta = {
        "method": ckpt.method,
        "decoder": bank.kind.value,
        "n_types": bank.n_types,
        "sigma2": bank.sigma2,
        "priors": _priors_to_json(ckpt.priors),
        "partition": ckpt.partition,
        "epoch": ckpt.epoch,
        "best_epoch": ckpt.best_epoch,
        "best_valid_mae": None if not np.isfinite(ckpt.best_valid_mae) else ckpt.best_valid_mae,
    }
    try:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config.json").write_text(ckpt.config.to_json() + "\n", encoding="utf-8")
        (directory / "networks.bin").write_bytes(b"".join(dump_network(s, p) for s, p in bank.networks()))
        (directory / "priors.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        (directory / "optimizer.bin").write_bytes(_optimizer_bytes(ckpt.adam))
        ckpt.history_frame().to_csv(directory / "history.csv", index=False, float_format="%.17g")
    except OSError as exc:
        raise ConfigError(f"无法写入检查点目录 {directory}: {exc}") from exc
    return {name: directory / name for name in FILES}


def load_checkpoint(directory: Path) -> Checkpoint:
    directory = Path(directory)
    missing = [name for name in FILES if not (directory / name).is_file()]
    if missing:
        raise DataError(f"检查点目录 {directory} 缺少 {missing}")
    try:
        config = validate_config(json.loads((directory / "config.json").read_text(encoding="utf-8")))
        meta = json.loads((directory / "priors.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"检查点 {directory} 的 JSON 无法解析: {exc}") from exc

    blob = (directory / "networks.bin").read_bytes()
    nets, offset = [], 0
    while offset < len(blob):
        spec, params, offset = load_network(blob, offset)
        nets.append((spec, params))
    kind = DecoderKind(meta["decoder"])
    n_types = int(meta["n_types"])
    expected = n_types + (1 if kind is DecoderKind.MESSAGE_PASSING else 0)
    if len(nets) != expected:
        raise DataError(f"networks.bin 含 {len(nets)} 个网络，{kind.value} 解码器 K={n_types} 需要 {expected} 个")
    node_spec, node_params = (nets[-1] if kind is DecoderKind.MESSAGE_PASSING else (None, None))
    bank = EdgeModelBank(
        kind, nets[0][0], tuple(p for _, p in nets[:n_types]), float(meta["sigma2"]), node_spec, node_params
    )

    adam = _optimizer_from_bytes(
        (directory / "optimizer.bin").read_bytes(),
        [s.n_params for s, _ in bank.networks()],
        config.training.learning_rate,
    )
    frame = pd.read_csv(directory / "history.csv")
    if list(frame.columns) != HISTORY_COLUMNS:
        raise DataError(f"history.csv 的列应为 {HISTORY_COLUMNS}，实际为 {list(frame.columns)}")
    history = [
        {col: (int(row[col]) if col == "epoch" else float(row[col])) for col in HISTORY_COLUMNS}
        for _, row in frame.iterrows()
    ]
    best = meta.get("best_valid_mae")
    return Checkpoint(
        config=config,
        bank=bank,
        priors=_priors_from_json(meta["priors"]),
        adam=adam,
        epoch=int(meta["epoch"]),
        best_epoch=int(meta["best_epoch"]),
        best_valid_mae=float("inf") if best is None else float(best),
        partition=meta.get("partition"),
        history=history,
    )
