# app/inference/trainer.py

"""
================================================================================
 训练循环 (app/inference/trainer.py)
================================================================================

模块功能:
对三种推断方法（cri / var-cri / evolving-cri）统一执行广义 EM：

    for epoch in 1..epochs:
        E 步 -> 先验 M 步 -> 一步 Θ 更新            （见各方法模块的 run_epoch）
        每 validate_every 轮: 在验证集上推断边类型并计算 1 步滚动 MAE_state，
                             保留验证误差最小的检查点；连续 patience 轮无改善即停止

每轮的随机数生成器由 (seed, epoch) 派生，因此从检查点续训与不间断训练得到
逐位相同的结果。epochs = 0 时直接返回初始化的检查点和空历史。
"""
import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, Optional

import numpy as np

from app.config import ExperimentConfig
from app.data.dataset import TrajectoryDataset
from app.decoder.bank import EdgeModelBank
from app.errors import ConfigError
from app.inference import common, cri, evolving, var_cri
from app.inference.store import Checkpoint
from app.metrics.evaluation import permutation_accuracy, rollout_mae_state
from app.nn.optim import AdamState

logger = logging.getLogger(__name__)

VALIDATION_HORIZON = 1


@dataclass
class TrainResult:
    last: Checkpoint
    best: Checkpoint
    edge_types: np.ndarray       # 训练集上最终状态推断的边类型 (S, N, N)

    @property
    def bank(self) -> EdgeModelBank:
        return self.best.bank

    @property
    def history(self):
        return self.last.history


def build_bank(config: ExperimentConfig, dataset: TrajectoryDataset, rng: np.random.Generator) -> EdgeModelBank:
    """按配置随机初始化边网络库，并检查与数据集的特征宽度、维度一致。"""
    model = config.model
    bank = EdgeModelBank.create(
        model.decoder, model.edge_widths, config.system.n_types, model.sigma2, rng,
        model.activation, model.node_hidden, dims=dataset.dims,
    )
    common.check_compatible(bank, dataset)
    return bank


def _prepare(config: ExperimentConfig, dataset: TrajectoryDataset, bank: EdgeModelBank):
    method = config.model.method
    if method == "cri":
        return cri.prepare(dataset, config)
    if method == "var-cri":
        return var_cri.prepare(dataset, config, bank)
    return evolving.prepare(dataset, config, bank.n_types)


def _initial_priors(config: ExperimentConfig, ctx, n_types: int):
    if config.model.method == "var-cri":
        return var_cri.initial_priors(n_types, ctx.partition)
    return cri.initial_priors(n_types)


def _state(method: str, ckpt: Checkpoint):
    cls = {"cri": cri.CriState, "var-cri": var_cri.VarState, "evolving-cri": evolving.EvolvingState}[method]
    return cls(ckpt.bank, ckpt.priors, ckpt.adam, epoch=ckpt.epoch)


_RUN_EPOCH: Dict[str, Callable] = {
    "cri": cri.run_epoch,
    "var-cri": var_cri.run_epoch,
    "evolving-cri": evolving.run_epoch,
}
_INFER_TYPES: Dict[str, Callable] = {
    "cri": cri.infer_types,
    "var-cri": var_cri.infer_types,
    "evolving-cri": evolving.infer_types,
}


def infer_types(ckpt: Checkpoint, dataset: TrajectoryDataset) -> np.ndarray:
    """用检查点中的 Θ 与先验在任意数据集上推断边类型。"""
    common.check_compatible(ckpt.bank, dataset)
    return _INFER_TYPES[ckpt.method](ckpt.bank, ckpt.priors, dataset, ckpt.config)


def initial_checkpoint(config: ExperimentConfig, train: TrajectoryDataset) -> Checkpoint:
    rng = np.random.default_rng(config.seed)
    bank = build_bank(config, train, rng)
    ctx = _prepare(config, train, bank)
    adam = tuple(AdamState.zeros(p.size, config.training.learning_rate) for _, p in bank.networks())
    partition = None
    if config.model.method == "var-cri":
        partition = [list(g) for g in ctx.partition.groups]
    return Checkpoint(config, bank, _initial_priors(config, ctx, bank.n_types), adam, partition=partition)


def _snapshot(ckpt: Checkpoint, state, **changes) -> Checkpoint:
    return replace(ckpt, bank=state.bank, priors=state.priors, adam=state.adam, epoch=state.epoch,
                   history=list(ckpt.history), **changes)


def _train_accuracy(state, ctx, method: str, train: TrajectoryDataset) -> float:
    if train.edge_types is None:
        return float("nan")
    edge_fn = {"cri": cri.infer_edge_types, "var-cri": var_cri.infer_edge_types,
               "evolving-cri": evolving.infer_edge_types}[method]
    types = edge_fn(state, ctx)
    truth = np.where(types >= 0, train.edge_types, -1)
    return permutation_accuracy(types, truth, state.bank.n_types)[0]


def fit(
    config: ExperimentConfig,
    train: TrajectoryDataset,
    valid: Optional[TrajectoryDataset] = None,
    resume: Optional[Checkpoint] = None,
    resume_best: Optional[Checkpoint] = None,
) -> TrainResult:
    """
    Args:
        config (ExperimentConfig): 实验配置，方法由 config.model.method 决定。
        train (TrajectoryDataset): 训练集。
        valid (TrajectoryDataset, optional): 验证集；缺省时不做早停，最佳检查点即最终状态。
        resume (Checkpoint, optional): 从该检查点续训，历史与轮数接着编号。
        resume_best (Checkpoint, optional): 续训前保留的最佳检查点；缺省取 resume。

    Returns:
        TrainResult: 最终检查点、最佳检查点与训练集上的边类型。
    """
    method = config.model.method
    training = config.training
    if resume is not None:
        if resume.method != method:
            raise ConfigError(f"检查点由 {resume.method} 训练，当前配置为 {method}")
        common.check_compatible(resume.bank, train)
        ckpt = replace(resume, config=config, history=list(resume.history))
    else:
        ckpt = initial_checkpoint(config, train)
    if valid is not None:
        common.check_compatible(ckpt.bank, valid)

    ctx = _prepare(config, train, ckpt.bank)
    state = _state(method, ckpt)
    best = replace(resume_best if resume_best is not None else ckpt, history=list(ckpt.history))
    stale = 0
    logger.info("开始训练: 方法=%s, 解码器=%s, K=%d, 轮数 %d -> %d",
                method, ckpt.bank.kind.value, ckpt.bank.n_types, ckpt.epoch, training.epochs)

    for epoch in range(ckpt.epoch + 1, training.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        state, record = _RUN_EPOCH[method](state, ctx, config, rng)
        row = {
            "epoch": record.epoch,
            "marginal_log_likelihood": record.marginal_log_likelihood,
            "q": record.q,
            "valid_mae_state": float("nan"),
            "accuracy": float("nan"),
        }
        logger.debug("第 %d 轮: 边缘对数似然 %.10g, Q %.10g, 步长减半 %d 次",
                     epoch, record.marginal_log_likelihood, record.q, record.halvings)

        validate = valid is not None and (epoch % training.validate_every == 0 or epoch == training.epochs)
        if validate:
            types = _INFER_TYPES[method](state.bank, state.priors, valid, config)
            mae = rollout_mae_state(state.bank, types, valid, VALIDATION_HORIZON).mae
            row["valid_mae_state"] = mae
            row["accuracy"] = _train_accuracy(state, ctx, method, train)
            logger.info("第 %d 轮: 边缘对数似然 %.6g, 验证 MAE_state %.6g, 训练集准确率 %.4f",
                        epoch, record.marginal_log_likelihood, mae, row["accuracy"])
        ckpt.history.append(row)

        if validate:
            if np.isfinite(mae) and mae < ckpt.best_valid_mae:
                ckpt = replace(ckpt, best_epoch=epoch, best_valid_mae=mae)
                best = _snapshot(ckpt, state)
                stale = 0
            else:
                stale += training.validate_every
                if stale >= training.patience:
                    logger.info("验证误差连续 %d 轮未改善，在第 %d 轮提前停止", stale, epoch)
                    ckpt = _snapshot(ckpt, state)
                    break
        ckpt = replace(ckpt, epoch=state.epoch)
    ckpt = _snapshot(ckpt, state)

    if valid is None:
        best = replace(ckpt, best_epoch=ckpt.epoch, history=list(ckpt.history))
        ckpt = replace(ckpt, best_epoch=ckpt.epoch)
    else:
        best = replace(best, best_epoch=ckpt.best_epoch, best_valid_mae=ckpt.best_valid_mae,
                       history=list(ckpt.history))
    return TrainResult(ckpt, best, infer_types(ckpt, train))


def _with_method(config: ExperimentConfig, method: str) -> ExperimentConfig:
    return config.model_copy(update={"model": config.model.model_copy(update={"method": method})})


def train(config: ExperimentConfig, dataset: TrajectoryDataset, valid: Optional[TrajectoryDataset] = None) -> TrainResult:
    return fit(_with_method(config, "cri"), dataset, valid)


def train_var(config: ExperimentConfig, dataset: TrajectoryDataset, valid: Optional[TrajectoryDataset] = None) -> TrainResult:
    return fit(_with_method(config, "var-cri"), dataset, valid)


def train_evolving(config: ExperimentConfig, dataset: TrajectoryDataset, valid: Optional[TrajectoryDataset] = None) -> TrainResult:
    return fit(_with_method(config, "evolving-cri"), dataset, valid)
