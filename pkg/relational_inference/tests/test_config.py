# tests/test_config.py

import json
from pathlib import Path

import pytest

from app.config import apply_overrides, default_config, load_config, validate_config
from app.errors import ConfigError


@pytest.mark.parametrize("preset", ["spring", "charge", "crystallization", "var", "teacher"])
def test_presets_validate(preset):
    config = default_config(preset, seed=7)
    assert config.seed == 7
    assert config.system.kind.value == preset
    assert validate_config(json.loads(config.to_json())) == config


def test_preset_defaults():
    spring = default_config("spring")
    assert spring.training.epochs == 500
    assert spring.training.learning_rate == 0.001
    assert spring.training.batch_steps is None
    assert spring.var_cri.n_groups == 2
    assert default_config("crystallization").model.method == "evolving-cri"
    assert default_config("var").model.decoder.value == "message_passing"


def test_unknown_preset():
    with pytest.raises(ConfigError, match="spring"):
        default_config("gravity")


def test_overrides_parse_json_then_string():
    config = apply_overrides(default_config("spring"), [
        "training.epochs=20",
        "model.edge_widths=[10,8,2]",
        "model.method=var-cri",
        "dataset.noise_beta=1e-5",
        "system.n_neighbors=null",
    ])
    assert config.training.epochs == 20
    assert config.model.edge_widths == [10, 8, 2]
    assert config.model.method == "var-cri"
    assert config.dataset.noise_beta == 1e-5
    assert config.system.n_neighbors is None


@pytest.mark.parametrize("item", [
    "training.epochs",
    "=3",
    "nothing.epochs=3",
    "training.epochs=-1",
    "model.method=gibbs",
    "var_cri.tol=0",
    "dataset.ratios=[0.5,0.5,0.5]",
])
def test_invalid_overrides(item):
    with pytest.raises(ConfigError):
        apply_overrides(default_config("spring"), [item])


def test_seed_is_required():
    data = json.loads(default_config("spring").to_json())
    del data["seed"]
    with pytest.raises(ConfigError):
        validate_config(data)


def test_to_json_is_sorted(spring_config):
    text = spring_config.to_json()
    keys = list(json.loads(text))
    assert keys == sorted(keys)
    assert spring_config.to_json() == text


def test_load_config_and_manifest(spring_config, tmp_path):
    path = tmp_path / "config.json"
    path.write_text(spring_config.to_json(), encoding="utf-8")
    assert load_config(path) == spring_config

    manifest = {"command": "simulate", "seed": 5, "config": json.loads(spring_config.to_json()), "artifacts": {}}
    path.write_text(json.dumps(manifest), encoding="utf-8")
    assert load_config(path) == spring_config


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(bad)


@pytest.mark.parametrize("path", sorted(Path(__file__).resolve().parents[1].glob("config_0*.json")), ids=lambda p: p.stem)
def test_example_configs_load(path):
    config = load_config(path)
    assert config.seed == 0
    assert config.model.edge_widths[0] in (2, 8, 10)
