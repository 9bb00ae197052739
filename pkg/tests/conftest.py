from dataclasses import replace

import numpy as np
import pytest
import torch

from protoseg.config import ModelConfig, PhantomSpec, TrainConfig
from protoseg.phantom import generate_phantom


@pytest.fixture(autouse=True)
def fixed_torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(base_channels=2, heads=2, ffn_dropout=0.0)


@pytest.fixture
def phantom_spec16():
    return PhantomSpec(grid_size=(16, 16, 16), radii=(2.0, 3.5, 5.0),
                       center_jitter=0.5, brain_margin=2.0, noise_sigma=0.02,
                       seed=11)


@pytest.fixture
def phantom_case16(phantom_spec16):
    return generate_phantom(phantom_spec16, "case16")


@pytest.fixture
def phantom_cases16(phantom_spec16):
    return [generate_phantom(replace(phantom_spec16, seed=11 + i), f"case{i}")
            for i in range(2)]


@pytest.fixture
def tiny_train_config(tiny_model_config):
    return TrainConfig(base_lr=1e-3, total_epochs=20, seed=3, crop=(16, 16, 16),
                       model=tiny_model_config)


def rand_labels(rng, shape=(1, 8, 8, 8)):
    return torch.from_numpy(rng.integers(0, 4, size=shape))


def softmax_field(rng, shape):
    logits = torch.from_numpy(rng.standard_normal(shape).astype(np.float32))
    return torch.softmax(logits, dim=1)
