"""Shared fixtures: tiny random / linear / planted models and synthetic pairs"""

import pytest
import torch

from app.models.data import PairedExample
from app.models.experiment import SyntheticTaskSpec
from app.models.runtime import ModelConfig
from app.services.data_service import build_planted_model, filter_correct, generate_suite, planted_config
from app.services.patching_service import cache_pairs
from app.services.runtime_service import load_model, random_weights


def make_config(**overrides) -> ModelConfig:
    base = dict(
        layers=2, heads_per_layer=2, model_dim=8, head_dim=4, mlp_hidden_dim=8,
        patch_count=5, num_classes=3, input_dim=4,
    )
    return ModelConfig(**{**base, **overrides})


def random_pairs(config: ModelConfig, n: int, seed: int = 0):
    generator = torch.Generator().manual_seed(seed)
    pairs = []
    for i in range(n):
        shape = (config.patch_count, config.input_dim)
        pairs.append(PairedExample(
            id=f"r-{i:05d}",
            clean=torch.randn(shape, generator=generator),
            corrupted=torch.randn(shape, generator=generator),
            label=i % config.num_classes,
            foreground=torch.zeros(config.patch_count, dtype=torch.bool),
        ))
    return pairs


@pytest.fixture
def tiny_config():
    return make_config()


@pytest.fixture
def tiny_model(tiny_config):
    return load_model(random_weights(tiny_config, seed=0))


@pytest.fixture
def linear_model():
    config = make_config(normalization="none", activation="identity", final_norm=False)
    return load_model(random_weights(config, seed=1, zero_query_key=True))


@pytest.fixture
def tiny_pairs(tiny_config):
    return random_pairs(tiny_config, 6)


@pytest.fixture
def tiny_cache(tiny_model, tiny_pairs):
    return cache_pairs(tiny_model, tiny_pairs)


@pytest.fixture
def linear_cache(linear_model, tiny_pairs):
    return cache_pairs(linear_model, tiny_pairs)


@pytest.fixture
def task_spec():
    return SyntheticTaskSpec(num_classes=4, input_dim=8, object_dims=4, grid_size=4, seed=0)


@pytest.fixture
def class_pairs(task_spec):
    return generate_suite(task_spec, range(task_spec.num_classes), 16)


@pytest.fixture
def planted_model(task_spec):
    return load_model(build_planted_model(task_spec, planted_config(task_spec)))


@pytest.fixture
def attack_model(task_spec):
    return load_model(build_planted_model(task_spec, signal_head=(0, 0), attack_head=(0, 1), attack_target=0))


@pytest.fixture
def planted_cache(planted_model, class_pairs):
    return cache_pairs(planted_model, filter_correct(planted_model, class_pairs))
