import json
from pathlib import Path

import pytest

from src.config import RunConfig, apply_overrides, build_config, describe_keys, load_config
from src.errors import ConfigError

from .conftest import tiny_data

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_defaults_are_valid():
    cfg = build_config({})
    assert cfg.vlm.cross_layers == [1, 3, 5, 7]
    assert cfg.fusion.film_layers == cfg.fusion.level_to_layer
    assert cfg.train.unet_rate == cfg.train.lr
    assert cfg.manifest_path == cfg.out_path / "data" / "manifest.jsonl"


@pytest.mark.parametrize("name", ["toy.json", "full.json"])
def test_shipped_configs_load(name):
    cfg = load_config(str(CONFIGS / name))
    assert cfg.fusion.embed_dim == cfg.vlm.embed_dim
    assert set(cfg.fusion.level_to_layer.values()) <= set(cfg.vlm.cross_layers)


def test_full_scale_config_schedule():
    cfg = load_config(str(CONFIGS / "full.json"))
    assert (cfg.train.epochs, cfg.train.batch_size, cfg.train.lr) == (60, 2, 1e-6)
    assert (cfg.train.step_size, cfg.train.gamma) == (1, 0.85)
    assert cfg.unet.image_size == 512


def test_overrides_parse_json_values():
    data = apply_overrides(
        {"train": {"lr": 1.0}},
        ["train.lr=0.5", "unet.widths=[8, 16, 32, 64]", "out=runs/x", "train.unet_frozen=true"],
    )
    assert data == {
        "train": {"lr": 0.5, "unet_frozen": True},
        "unet": {"widths": [8, 16, 32, 64]},
        "out": "runs/x",
    }


@pytest.mark.parametrize("item", ["train.lr", "seed.value=3"])
def test_malformed_overrides(item):
    with pytest.raises(ConfigError):
        apply_overrides({"seed": 1}, [item])


@pytest.mark.parametrize(
    "sections",
    [
        {"train": {"learning_rate": 0.1}},
        {"colour": "blue"},
        {"unet": {"image_size": 40}},
        {"unet": {"widths": [4, 8, 12, 32]}},
        {"vlm": {"embed_dim": 15}},
        {"vlm": {"cross_layers": [1, 2, 3, 9]}},
        {"fusion": {"embed_dim": 32}},
        {"fusion": {"alpha": 0.0}},
        {"fusion": {"clamp_lo": 5.0}},
        {"fusion": {"level_to_layer": {"1": 1, "2": 2, "3": 3}}},
        {"fusion": {"level_to_layer": {"1": 0, "2": 2, "3": 3, "4": 4}}},
        {"fusion": {"patch_size": 3}},
        {"split": {"train": 0.8}},
        {"train": {"betas": [0.9, 1.0]}},
        {"train": {"epochs": 0}},
    ],
)
def test_invalid_configs_raise_config_error(sections):
    with pytest.raises(ConfigError):
        build_config(tiny_data(**sections))


def test_tiny_config_is_valid():
    cfg = build_config(tiny_data())
    assert cfg.fusion.level_to_layer == {1: 1, 2: 2, 3: 3, 4: 4}


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "absent.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{ nope")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(str(broken))


def test_load_config_applies_overrides(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(tiny_data(tmp_path)))
    cfg = load_config(str(path), ["train.epochs=3", "fusion.alpha=0.2"])
    assert (cfg.train.epochs, cfg.fusion.alpha) == (3, 0.2)
    assert cfg.checkpoint_path == tmp_path / "checkpoints"


def test_config_hash_tracks_content():
    a = build_config(tiny_data())
    assert a.config_hash() == build_config(tiny_data()).config_hash()
    assert a.config_hash() != build_config(tiny_data(seed=8)).config_hash()
    assert RunConfig.model_validate_json(a.model_dump_json()).config_hash() == a.config_hash()


def test_describe_keys_flattens_sections():
    keys = dict(describe_keys())
    assert "train.lr" in keys and "fusion.alpha" in keys and "preprocess.radius" in keys
    assert "unet" not in keys
    assert "default: 0.85" in keys["train.gamma"]
