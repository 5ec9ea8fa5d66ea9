# tests/test_api.py

import json

import pytest
from conftest import TINY_SPRING
from fastapi.testclient import TestClient

from app.api.main import app
from app.cli import main

client = TestClient(app)


def _simulate(**body):
    return client.post("/simulate", json={"seed": 5, **body})


def test_root_is_alive():
    response = client.get("/")
    assert response.status_code == 200
    assert "message" in response.json()


def test_simulate_preset_summaries():
    response = _simulate(preset="spring", overrides=TINY_SPRING)
    assert response.status_code == 200
    body = response.json()
    assert body["kind"] == "spring" and body["seed"] == 5
    assert [s["split"] for s in body["splits"]] == ["train", "valid", "test"]
    assert [s["n_sims"] for s in body["splits"]] == [4, 1, 1]
    assert body["splits"][0]["n_nodes"] == 4
    assert body["noise_level"] is None
    assert _simulate(preset="spring", overrides=TINY_SPRING).json() == body


def test_simulate_with_full_config(spring_config):
    body = spring_config.model_dump(mode="json")
    body.pop("seed")
    response = _simulate(config=body, overrides=["dataset.noise_beta=1e-4"])
    assert response.status_code == 200
    assert response.json()["noise_level"] > 0


@pytest.mark.parametrize("body", [{}, {"preset": "gravity"}, {"preset": "spring", "overrides": ["training.epochs=-1"]}])
def test_invalid_simulate_requests(body):
    response = _simulate(**body)
    assert response.status_code == 422
    assert "ConfigError" in response.json()["detail"]


def test_missing_seed_is_rejected():
    assert client.post("/simulate", json={"preset": "spring"}).status_code == 422


def test_divergent_simulation_is_a_server_error():
    response = _simulate(preset="spring", overrides=TINY_SPRING + ["system.dt=100"])
    assert response.status_code == 500
    assert "DivergenceError" in response.json()["detail"]


def test_evaluate_missing_checkpoint(tmp_path):
    response = client.post("/evaluate", json={"checkpoint": str(tmp_path / "none"), "dataset": str(tmp_path / "x.bin")})
    assert response.status_code == 400


def test_evaluate_matches_cli_report(spring_config, tmp_path):
    config_path = tmp_path / "config.json"
    config_path.write_text(spring_config.to_json(), encoding="utf-8")
    data, ckpt, out = tmp_path / "data", tmp_path / "ckpt", tmp_path / "report"
    assert main(["simulate", "--config", str(config_path), "--out", str(data)]) == 0
    assert main(["train", "--config", str(config_path), "--data", str(data), "--out", str(ckpt)]) == 0
    assert main(["evaluate", "--checkpoint", str(ckpt), "--dataset", str(data / "test.bin"), "--out", str(out)]) == 0

    response = client.post("/evaluate", json={"checkpoint": str(ckpt), "dataset": str(data / "test.bin")})
    assert response.status_code == 200
    assert response.json() == json.loads((out / "report.json").read_text(encoding="utf-8"))
