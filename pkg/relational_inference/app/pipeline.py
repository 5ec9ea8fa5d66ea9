# app/pipeline.py

"""
================================================================================
 流水线 (app/pipeline.py)
================================================================================

命令行与 HTTP 接口共用的编排逻辑：按配置生成并划分数据集、对检查点做评估。
这里不做任何文件读写之外的格式转换，命令行负责落盘与 manifest，HTTP 层负责
把结果包装成响应模型。
"""
import hashlib
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from app.api.schemas import DatasetSummary
from app.config import ExperimentConfig
from app.data.dataset import TrajectoryDataset
from app.data.splits import SPLIT_NAMES, split_dataset
from app.data.storage import dataset_bytes
from app.decoder.bank import EdgeModelBank
from app.inference import trainer
from app.inference.store import Checkpoint
from app.metrics.evaluation import build_report
from app.metrics.report import EvaluationReport
from app.nn.optim import AdamState
from app.physics.noise import inject_noise
from app.physics.simulate import simulate_batch, simulate_var
from app.physics.systems import SystemKind
from app.physics.teacher import simulate_teacher_batch, teacher_bank

logger = logging.getLogger(__name__)


@dataclass
class SimulationOutput:
    splits: Dict[str, TrajectoryDataset]
    noise_level: Optional[float]
    teacher: Optional[EdgeModelBank] = None


def sha256_hex(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def generate(config: ExperimentConfig) -> Tuple[TrajectoryDataset, Optional[EdgeModelBank]]:
    """按 config.system 生成全部模拟（划分之前）。"""
    system, n_sims, seed = config.system, config.dataset.n_sims, config.seed
    if system.kind is SystemKind.VAR:
        return simulate_var(system.var_spec(), seed, n_sims), None
    if system.kind is SystemKind.TEACHER:
        bank = teacher_bank(system.n_types, system.teacher_hidden, config.model.sigma2, system.teacher_seed)
        data = simulate_teacher_batch(
            bank, system.n_particles, system.steps, system.dt, n_sims, seed, system.teacher_seed,
            downsample=system.downsample, n_neighbors=system.n_neighbors,
        )
        return data, bank
    return simulate_batch(system.particle_spec(), n_sims, seed), None


def simulate_datasets(config: ExperimentConfig) -> SimulationOutput:
    data, teacher = generate(config)
    level = None
    if config.dataset.noise_beta > 0:
        data, level = inject_noise(data, config.dataset.noise_beta, config.seed)
        logger.info("注入噪声 β=%g，噪声水平 %.6g", config.dataset.noise_beta, level)
    parts = split_dataset(data, config.dataset.split, config.dataset.ratios, config.seed)
    return SimulationOutput(dict(zip(SPLIT_NAMES, parts)), level, teacher)


def summarize(name: str, ds: TrajectoryDataset) -> DatasetSummary:
    return DatasetSummary(
        split=name, n_sims=ds.n_sims, n_steps=ds.n_steps, n_nodes=ds.n_nodes, dims=ds.dims,
        feature_layout=ds.feature_layout, sha256=sha256_hex(dataset_bytes(ds)),
    )


def teacher_checkpoint(config: ExperimentConfig, bank: EdgeModelBank) -> Checkpoint:
    """teacher 网络库本身作为检查点（τ 取均匀分布），用作评估的上界参照。"""
    model = config.model.model_copy(update={
        "method": "cri", "decoder": bank.kind, "edge_widths": list(bank.edge_spec.layer_widths),
        "activation": bank.edge_spec.activation,
    })
    cfg = config.model_copy(update={"model": model})
    adam = tuple(AdamState.zeros(p.size, config.training.learning_rate) for _, p in bank.networks())
    return Checkpoint(cfg, bank, np.full(bank.n_types, 1.0 / bank.n_types), adam)


def evaluate(
    ckpt: Checkpoint, dataset: TrajectoryDataset, horizons: Optional[Sequence[int]] = None
) -> Tuple[EvaluationReport, np.ndarray]:
    """在数据集上推断边类型并计算全部指标。"""
    horizons = ckpt.config.rollout_horizons if horizons is None else list(horizons)
    types = trainer.infer_types(ckpt, dataset)
    report = build_report(ckpt.bank, types, dataset, ckpt.method, horizons)
    logger.info("评估完成: 准确率 %s, MAE_state %s", report.accuracy, report.mae_state)
    return report, types
