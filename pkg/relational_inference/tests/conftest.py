# tests/conftest.py

"""测试共用的夹具：小规模配置、合成数据集与常数输出的边网络库。"""
import numpy as np
import pytest

from app import pipeline
from app.config import apply_overrides, default_config
from app.data.dataset import TrajectoryDataset
from app.decoder.bank import DecoderKind, EdgeModelBank
from app.nn.mlp import MlpSpec
from app.physics.teacher import simulate_teacher_batch, teacher_bank

TINY_SPRING = [
    "system.n_particles=4",
    "system.steps=12",
    "dataset.n_sims=6",
    "model.edge_widths=[10,16,2]",
    "model.node_hidden=16",
    "training.epochs=3",
    "training.validate_every=1",
    "training.patience=100",
    "rollout_horizons=[1,3]",
]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def spring_config():
    return apply_overrides(default_config("spring", seed=5), TINY_SPRING)


@pytest.fixture
def spring_splits(spring_config):
    """(train, valid, test)。"""
    splits = pipeline.simulate_datasets(spring_config).splits
    return splits["train"], splits["valid"], splits["test"]


@pytest.fixture(scope="session")
def teacher_data():
    """(teacher 网络库, 由它生成的 3 次模拟)；teacher_seed=3 记录在数据集中。"""
    bank = teacher_bank(2, [16], 0.1, seed=3)
    data = simulate_teacher_batch(bank, n_particles=4, steps=10, dt=0.01, n_sims=3, seed=20, teacher_seed=3)
    return bank, data


def _constant_bank(outputs, node_width=5, sigma2=0.1):
    """每个类型的边网络都是常数映射：权重为零，偏置为 outputs[k]。"""
    outputs = np.asarray(outputs, dtype=np.float64)
    d = outputs.shape[1]
    spec = MlpSpec((2 * node_width, d))
    params = []
    for c in outputs:
        p = np.zeros(spec.n_params)
        p[-d:] = c
        params.append(p)
    return EdgeModelBank(DecoderKind.PHYSICS_INDUCED, spec, tuple(params), sigma2)


def _random_dataset(rng, S=2, T=3, N=3, d=2, layout="position_velocity_mass", kind="spring"):
    shape = (S, T, N, d)
    return TrajectoryDataset(
        kind=kind,
        dt=0.01,
        positions=rng.standard_normal(shape),
        velocities=rng.standard_normal(shape),
        masses=np.exp(rng.uniform(-1.0, 1.0, size=(S, N))),
        increments=rng.standard_normal(shape),
        feature_layout=layout,
    )


@pytest.fixture
def make_constant_bank():
    return _constant_bank


@pytest.fixture
def make_random_dataset():
    return _random_dataset
