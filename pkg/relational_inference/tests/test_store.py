# tests/test_store.py

import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from app.config import apply_overrides
from app.errors import DataError
from app.inference import trainer
from app.inference.store import FILES, load_checkpoint, save_checkpoint


@pytest.fixture
def trained(spring_config, spring_splits):
    train, valid, _ = spring_splits
    return trainer.train(spring_config, train, valid).last


def test_save_writes_every_file(trained, tmp_path):
    paths = save_checkpoint(trained, tmp_path / "ckpt")
    assert sorted(paths) == sorted(FILES)
    assert all(p.is_file() for p in paths.values())


def test_saving_twice_is_bytewise_identical(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "a")
    save_checkpoint(load_checkpoint(tmp_path / "a"), tmp_path / "b")
    for name in FILES:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_round_trip_restores_state(trained, tmp_path):
    save_checkpoint(trained, tmp_path)
    loaded = load_checkpoint(tmp_path)
    assert loaded.config == trained.config
    assert loaded.epoch == trained.epoch == 3
    assert loaded.bank.kind is trained.bank.kind
    for (spec_a, a), (spec_b, b) in zip(loaded.bank.networks(), trained.bank.networks()):
        assert spec_a == spec_b
        assert a.tobytes() == b.tobytes()
    assert loaded.priors.tobytes() == trained.priors.tobytes()
    for sa, sb in zip(loaded.adam, trained.adam):
        assert sa.step == sb.step
        assert_array_equal(sa.m, sb.m)
        assert_array_equal(sa.v, sb.v)
    assert [r["epoch"] for r in loaded.history] == [1, 2, 3]
    assert_array_equal(
        [r["marginal_log_likelihood"] for r in loaded.history],
        [r["marginal_log_likelihood"] for r in trained.history],
    )


def test_group_priors_round_trip(spring_config, spring_splits, tmp_path):
    config = apply_overrides(spring_config, ["model.method=var-cri", "training.epochs=1"])
    ckpt = trainer.train_var(config, spring_splits[0]).last
    save_checkpoint(ckpt, tmp_path)
    meta = json.loads((tmp_path / "priors.json").read_text(encoding="utf-8"))
    assert meta["method"] == "var-cri" and meta["partition"] == [[0, 1], [2]]
    loaded = load_checkpoint(tmp_path)
    assert sorted(loaded.priors) == [1, 2]
    assert loaded.priors[2].tobytes() == ckpt.priors[2].tobytes()
    assert loaded.partition == ckpt.partition


def test_missing_files_raise(trained, tmp_path):
    save_checkpoint(trained, tmp_path)
    (tmp_path / "optimizer.bin").unlink()
    with pytest.raises(DataError, match="optimizer.bin"):
        load_checkpoint(tmp_path)


def test_corrupted_files_raise(trained, tmp_path):
    save_checkpoint(trained, tmp_path)
    (tmp_path / "priors.json").write_text("{not json", encoding="utf-8")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path)

    save_checkpoint(trained, tmp_path)
    blob = (tmp_path / "optimizer.bin").read_bytes()
    (tmp_path / "optimizer.bin").write_bytes(blob + b"\x00")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path)

    save_checkpoint(trained, tmp_path)
    (tmp_path / "history.csv").write_text("epoch,mll\n1,0.5\n", encoding="utf-8")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path)


def test_unvalidated_checkpoint_has_no_best_error(spring_config, spring_splits, tmp_path):
    config = apply_overrides(spring_config, ["training.epochs=0"])
    ckpt = trainer.initial_checkpoint(config, spring_splits[0])
    save_checkpoint(ckpt, tmp_path)
    meta = json.loads((tmp_path / "priors.json").read_text(encoding="utf-8"))
    assert meta["best_valid_mae"] is None
    loaded = load_checkpoint(tmp_path)
    assert loaded.best_valid_mae == float("inf")
    assert loaded.history == []
    assert np.all(loaded.priors == 0.5)
