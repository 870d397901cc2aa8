import json

import pytest

from config.model_config import EncoderConfig, TrainConfig
from modules.dataset import SyntheticSpec, generate_synthetic
from modules.model_runner import build_model


@pytest.fixture
def tiny_config():
    return EncoderConfig(image_size=8, channels=1, patch_size=4, embed_dim=16, depth=1, heads=2,
                         mlp_ratio=2.0, num_classes=4, prompt_tokens_per_class=2, lora_rank=2,
                         lora_scale=2.0)


@pytest.fixture
def tiny_spec():
    return SyntheticSpec(num_classes=4, samples_per_class=30, image_size=8, noise_std=0.1, seed=3)


@pytest.fixture
def tiny_splits(tiny_spec):
    return generate_synthetic(tiny_spec)


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, init_seed=11, sampler_seed=5)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(epochs=1, batch_size=16, lr=1e-2, seed=7)


@pytest.fixture
def tiny_run_file(tmp_path, tiny_config, tiny_spec):
    """Run config JSON for the CLI tests"""
    raw = {
        "encoder": tiny_config.to_dict(),
        "train": {"epochs": 1, "batch_size": 16, "lr": 0.01},
        "data": {"kind": "synthetic", "num_classes": 4, "samples_per_class": 20, "image_size": 8,
                 "noise_std": 0.1},
        "seed": 0,
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(raw))
    return str(path)
