# tests/test_data.py

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_array_equal

from app.data.dataset import TrajectoryDataset, concat_sims
from app.data.splits import split_dataset, split_sizes
from app.data.storage import block_frame, dataset_bytes, export_block_csv, load_dataset, save_dataset
from app.errors import ConfigError, DataError
from app.physics.simulate import simulate
from app.physics.systems import ParticleSystemSpec, SystemKind


@pytest.fixture
def evolving_run():
    spec = ParticleSystemSpec(SystemKind.CHARGE, n_particles=5, n_types=2, steps=20, n_neighbors=2)
    return simulate(spec, seed=4)


# ==============================================================================
# 数据集容器
# ==============================================================================

def test_feature_layouts(make_random_dataset, rng):
    ds = make_random_dataset(rng)
    feats = ds.node_features()
    assert feats.shape == (2, 3, 3, 5)
    assert_array_equal(feats[..., :2], ds.positions)
    assert_array_equal(feats[..., 2:4], ds.velocities)
    assert_array_equal(feats[0, 1, :, 4], ds.masses[0])

    value = make_random_dataset(rng, d=1, layout="value", kind="var")
    assert value.feature_width == 1
    assert_array_equal(value.node_features(), value.positions)


def test_dataset_rejects_inconsistent_arrays(rng):
    shape = (1, 2, 3, 2)
    good = dict(kind="spring", dt=0.01, positions=np.zeros(shape), velocities=np.zeros(shape),
                masses=np.ones((1, 3)), increments=np.zeros(shape))
    TrajectoryDataset(**good)
    with pytest.raises(DataError):
        TrajectoryDataset(**{**good, "masses": np.array([[1.0, 0.0, 1.0]])})
    with pytest.raises(DataError):
        TrajectoryDataset(**{**good, "increments": np.zeros((1, 3, 3, 2))})
    with pytest.raises(DataError):
        TrajectoryDataset(**{**good, "edge_types": np.zeros((1, 2, 2), dtype=np.int8)})
    with pytest.raises(ConfigError):
        TrajectoryDataset(**{**good, "feature_layout": "polar"})


def test_subsets_and_concatenation(make_random_dataset, rng):
    ds = make_random_dataset(rng, S=3, T=4)
    steps = ds.subset_steps([1, 3])
    assert steps.n_steps == 2
    assert_array_equal(steps.frame_index, [1, 3])
    joined = concat_sims([ds.subset_sims([0]), ds.subset_sims([1, 2])])
    assert_array_equal(joined.positions, ds.positions)
    assert_array_equal(joined.masses, ds.masses)
    assert ds.without_ground_truth().edge_types is None


# ==============================================================================
# 划分
# ==============================================================================

def test_split_sizes_follow_ratios():
    assert split_sizes(100, (0.7, 0.15, 0.15)) == (70, 15, 15)
    assert split_sizes(6, (0.7, 0.15, 0.15)) == (4, 1, 1)
    assert sum(split_sizes(37, (0.5, 0.25, 0.25))) == 37
    with pytest.raises(ConfigError):
        split_sizes(10, (0.5, 0.5, 0.5))
    with pytest.raises(ConfigError):
        split_sizes(10, (1.2, -0.1, -0.1))


def test_ratio_split_is_by_simulation(make_random_dataset, rng):
    ds = make_random_dataset(rng, S=20)
    train, valid, test = split_dataset(ds, "ratio", (0.7, 0.15, 0.15), seed=0)
    assert (train.n_sims, valid.n_sims, test.n_sims) == (14, 3, 3)
    assert (train.split, valid.split, test.split) == ("train", "valid", "test")
    assert_array_equal(valid.positions, ds.positions[14:17])


def test_extrapolation_split_is_contiguous(make_random_dataset, rng):
    ds = make_random_dataset(rng, S=1, T=20)
    parts = split_dataset(ds, "extrapolation", (0.7, 0.15, 0.15), seed=0)
    assert_array_equal(parts[0].frame_index, np.arange(14))
    assert_array_equal(parts[1].frame_index, np.arange(14, 17))
    assert_array_equal(parts[2].frame_index, np.arange(17, 20))


def test_interpolation_split_partitions_frames(make_random_dataset, rng):
    ds = make_random_dataset(rng, S=1, T=20)
    parts = split_dataset(ds, "interpolation", (0.7, 0.15, 0.15), seed=3)
    frames = np.concatenate([p.frame_index for p in parts])
    assert_array_equal(np.sort(frames), np.arange(20))
    assert [p.n_steps for p in parts] == [14, 3, 3]
    for p in parts:
        assert np.all(np.diff(p.frame_index) > 0)
    again = split_dataset(ds, "interpolation", (0.7, 0.15, 0.15), seed=3)
    assert_array_equal(again[1].frame_index, parts[1].frame_index)


def test_unknown_split_mode_raises(make_random_dataset, rng):
    with pytest.raises(ConfigError):
        split_dataset(make_random_dataset(rng), "shuffle", (0.7, 0.15, 0.15), seed=0)


# ==============================================================================
# 文件格式
# ==============================================================================

def test_round_trip_preserves_every_block(evolving_run, tmp_path):
    path = tmp_path / "data.bin"
    save_dataset(evolving_run, path)
    back = load_dataset(path)
    for name in ("positions", "velocities", "masses", "increments", "edge_types", "neighbors", "frame_index"):
        assert_array_equal(getattr(back, name), getattr(evolving_run, name))
    assert back.system == evolving_run.system
    assert back.dt == evolving_run.dt and back.seed == evolving_run.seed
    assert dataset_bytes(back) == path.read_bytes()


def test_round_trip_without_ground_truth(make_random_dataset, rng, tmp_path):
    ds = make_random_dataset(rng)
    path = tmp_path / "plain.bin"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.edge_types is None and back.neighbors is None


def test_corrupted_files_raise(evolving_run, tmp_path):
    blob = dataset_bytes(evolving_run)
    cases = {
        "truncated.bin": blob[:-8],
        "trailing.bin": blob + b"\x00",
        "noheader.bin": b"\x00\x01\x02",
        "badjson.bin": b"{not json\n" + blob,
        "foreign.bin": b'{"format": "other", "version": 1}\n',
    }
    for name, data in cases.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(DataError):
            load_dataset(tmp_path / name)
    with pytest.raises(DataError):
        load_dataset(tmp_path / "missing.bin")


def test_block_csv_export(evolving_run, tmp_path):
    path = tmp_path / "types.csv"
    export_block_csv(evolving_run, "edge_types", path)
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["sim", "receiver", "sender", "value"]
    assert len(frame) == 25
    row = frame[(frame.receiver == 1) & (frame.sender == 3)].iloc[0]
    assert row.value == evolving_run.edge_types[0, 1, 3]

    nb = block_frame(evolving_run, "neighbors")
    assert list(nb.columns) == ["sim", "step", "node", "slot", "value"]
    assert len(nb) == evolving_run.neighbors.size

    with pytest.raises(ConfigError):
        block_frame(evolving_run, "accelerations")
    with pytest.raises(DataError):
        block_frame(evolving_run.without_ground_truth(), "edge_types")
