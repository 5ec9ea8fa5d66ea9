# tests/test_cli.py

import json

import pandas as pd
import pytest

from app.cli import main
from app.config import apply_overrides, default_config

TINY_TEACHER = [
    "system.n_particles=4",
    "system.steps=20",
    "system.teacher_hidden=[16]",
    "system.teacher_seed=3",
    "dataset.n_sims=10",
    "model.edge_widths=[10,16,2]",
    "training.epochs=1",
    "rollout_horizons=[1,5]",
]


@pytest.fixture
def config_file(spring_config, tmp_path):
    path = tmp_path / "config.json"
    path.write_text(spring_config.to_json(), encoding="utf-8")
    return path


@pytest.fixture
def data_dir(config_file, tmp_path):
    out = tmp_path / "data"
    assert main(["simulate", "--config", str(config_file), "--out", str(out)]) == 0
    return out


@pytest.fixture
def checkpoint_dir(config_file, data_dir, tmp_path):
    out = tmp_path / "ckpt"
    assert main(["train", "--config", str(config_file), "--data", str(data_dir), "--out", str(out)]) == 0
    return out


# ==============================================================================
# 数据
# ==============================================================================

def test_simulate_writes_splits_and_manifest(data_dir):
    for name in ("train.bin", "valid.bin", "test.bin", "manifest.json"):
        assert (data_dir / name).is_file()
    manifest = json.loads((data_dir / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "simulate"
    assert manifest["seed"] == 5
    assert sorted(manifest["artifacts"]) == ["test.bin", "train.bin", "valid.bin"]


def test_simulate_is_reproducible(config_file, data_dir, tmp_path, capsys):
    again = tmp_path / "again"
    capsys.readouterr()
    assert main(["simulate", "--config", str(config_file), "--out", str(again)]) == 0
    printed = json.loads(capsys.readouterr().out)
    original = json.loads((data_dir / "manifest.json").read_text(encoding="utf-8"))
    assert printed["artifacts"] == original["artifacts"]
    for name in ("train.bin", "valid.bin", "test.bin"):
        assert (again / name).read_bytes() == (data_dir / name).read_bytes()


def test_manifest_reruns_as_config(data_dir, tmp_path):
    rerun = tmp_path / "rerun"
    assert main(["simulate", "--config", str(data_dir / "manifest.json"), "--out", str(rerun)]) == 0
    assert (rerun / "train.bin").read_bytes() == (data_dir / "train.bin").read_bytes()


def test_noise_injection(data_dir, tmp_path, capsys):
    out = tmp_path / "noisy.bin"
    assert main(["inject-noise", "--dataset", str(data_dir / "train.bin"), "--beta", "1e-3",
                 "--seed", "0", "--out", str(out)]) == 0
    payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert payload["beta"] == 1e-3 and payload["noise_level"] > 0
    assert out.read_bytes() != (data_dir / "train.bin").read_bytes()


def test_export_csv(data_dir, tmp_path):
    out = tmp_path / "masses.csv"
    assert main(["export-csv", "--dataset", str(data_dir / "train.bin"), "--block", "masses", "--out", str(out)]) == 0
    assert len(pd.read_csv(out)) == 4 * 4


# ==============================================================================
# 训练与评估
# ==============================================================================

def test_train_writes_last_and_best(checkpoint_dir):
    for sub in (checkpoint_dir, checkpoint_dir / "best"):
        for name in ("config.json", "networks.bin", "priors.json", "optimizer.bin", "history.csv"):
            assert (sub / name).is_file()
    assert len(pd.read_csv(checkpoint_dir / "history.csv")) == 3
    manifest = json.loads((checkpoint_dir / "manifest.json").read_text(encoding="utf-8"))
    assert "best/networks.bin" in manifest["artifacts"]


def test_resume_continues_numbering(config_file, data_dir, checkpoint_dir, tmp_path):
    out = tmp_path / "more"
    assert main(["train", "--config", str(config_file), "--set", "training.epochs=5", "--data", str(data_dir),
                 "--out", str(out), "--resume", str(checkpoint_dir)]) == 0
    assert list(pd.read_csv(out / "history.csv")["epoch"]) == [1, 2, 3, 4, 5]


def test_evaluate_writes_report(checkpoint_dir, data_dir, tmp_path):
    out = tmp_path / "report"
    assert main(["evaluate", "--checkpoint", str(checkpoint_dir / "best"), "--dataset", str(data_dir / "test.bin"),
                 "--out", str(out), "--horizons", "1", "2"]) == 0
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["method"] == "cri"
    assert 0.0 <= report["accuracy"] <= 1.0
    assert sorted(report["mae_state"]) == ["1", "2"]
    edges = pd.read_csv(out / "edges.csv")
    assert len(edges) == report["n_edges"] == 4 * 3
    assert set(edges.columns) >= {"predicted", "mapped", "truth", "correct"}


def test_export_forces_rows(checkpoint_dir, tmp_path):
    out = tmp_path / "forces.csv"
    assert main(["export-forces", "--checkpoint", str(checkpoint_dir), "--out", str(out),
                 "--extent", "2", "--resolution", "7"]) == 0
    frame = pd.read_csv(out)
    assert len(frame) == 7 * 7 * 2
    assert list(frame.columns) == ["type", "x", "y", "fx", "fy"]
    assert (tmp_path / "forces.manifest.json").is_file()


def test_aggregate_reports(checkpoint_dir, data_dir, tmp_path):
    paths = []
    for h in ("1", "2"):
        out = tmp_path / f"r{h}"
        assert main(["evaluate", "--checkpoint", str(checkpoint_dir), "--dataset", str(data_dir / "test.bin"),
                     "--out", str(out), "--horizons", h]) == 0
        paths.append(str(out / "report.json"))
    summary = tmp_path / "summary.csv"
    assert main(["aggregate", "--reports", *paths, "--out", str(summary)]) == 0
    frame = pd.read_csv(summary).set_index("metric")
    assert frame.loc["accuracy", "std"] == 0.0


def test_teacher_checkpoint_recovers_types(tmp_path):
    config = apply_overrides(default_config("teacher", seed=11), TINY_TEACHER)
    cfg_path = tmp_path / "teacher.json"
    cfg_path.write_text(config.to_json(), encoding="utf-8")
    data = tmp_path / "data"
    assert main(["simulate", "--config", str(cfg_path), "--out", str(data)]) == 0
    assert (data / "teacher" / "networks.bin").is_file()
    out = tmp_path / "report"
    assert main(["evaluate", "--checkpoint", str(data / "teacher"), "--dataset", str(data / "test.bin"),
                 "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["accuracy"] == 1.0
    assert report["mae_ef"] == pytest.approx(0.0, abs=1e-12)
    assert report["mae_state"]["1"] == pytest.approx(0.0, abs=1e-9)


# ==============================================================================
# 退出码
# ==============================================================================

def test_missing_config_exits_with_config_code(tmp_path):
    assert main(["simulate", "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2


def test_bad_override_exits_with_config_code(config_file, tmp_path):
    assert main(["simulate", "--config", str(config_file), "--set", "training.epochs=-3", "--out", str(tmp_path)]) == 2


def test_missing_data_exits_with_data_code(config_file, tmp_path):
    assert main(["train", "--config", str(config_file), "--data", str(tmp_path / "empty"),
                 "--out", str(tmp_path / "ckpt")]) == 3
    assert main(["evaluate", "--checkpoint", str(tmp_path / "nope"), "--dataset", str(tmp_path / "x.bin"),
                 "--out", str(tmp_path / "r")]) == 3


def test_divergence_exits_with_numeric_code(config_file, tmp_path):
    assert main(["simulate", "--config", str(config_file), "--set", "system.dt=100", "--out", str(tmp_path)]) == 4
