import numpy as np
import pytest

from src.config import build_config
from src.data.prompts import vocabulary_seed_texts
from src.data.synthetic import generate_synthetic
from src.tensor import reset_default_record
from src.vocab import Vocabulary

TINY = {
    "seed": 7,
    "unet": {"image_size": 32, "widths": [4, 8, 16, 32], "bridge_width": 32, "residual_depth": 1},
    "vlm": {
        "embed_dim": 16,
        "heads": 2,
        "layers": 5,
        "cross_layers": [1, 2, 3, 4],
        "vision_layers": 1,
        "patch_size": 16,
        "mlp_ratio": 2,
        "max_seq_len": 96,
    },
    "fusion": {"patch_size": 4, "embed_dim": 16, "level_to_layer": {"1": 1, "2": 2, "3": 3, "4": 4}},
    "synthetic": {"n": 12, "image_size": 32},
    "train": {"epochs": 1, "batch_size": 2, "lr": 1e-3, "max_new_tokens": 4},
    "preprocess": {"size": 32},
}


def tiny_data(tmp_path=None, **sections) -> dict:
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in TINY.items()}
    for key, value in sections.items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    if tmp_path is not None:
        data["out"] = str(tmp_path)
    return data


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_cfg(tmp_path):
    return build_config(tiny_data(tmp_path))


@pytest.fixture(scope="session")
def seed_vocab():
    return Vocabulary.build(vocabulary_seed_texts())


@pytest.fixture(scope="session")
def tiny_samples():
    return generate_synthetic(12, image_size=32, seed=3)


@pytest.fixture(autouse=True)
def fresh_default_record():
    yield
    reset_default_record()
