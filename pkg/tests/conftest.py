import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from elfua.config import tiny_model_config
from elfua.data import load_manifest
from elfua.network import init_model
from elfua.synthworld import SynthWorldConfig, generate_world

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)


@pytest.fixture
def tiny_state():
    return init_model(tiny_model_config(), seed=0)


@pytest.fixture
def tiny_state64():
    return init_model(tiny_model_config(dtype="float64"), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def images(rng):
    return rng.random((6, 32, 32, 3)).astype(np.float32)


@pytest.fixture(scope="session")
def small_world(tmp_path_factory):
    """A few persons at 32 px; enough for end-to-end plumbing tests."""
    out = tmp_path_factory.mktemp("world")
    cfg = SynthWorldConfig(n_train_persons=4, n_test_persons=3, samples_per_person=12,
                           n_source_persons=8, source_samples_per_person=6, seed=7)
    generate_world(cfg, out)
    return out


@pytest.fixture(scope="session")
def small_data(small_world):
    source = load_manifest(small_world / "source.jsonl", "source", image_size=32)
    persons = load_manifest(small_world / "persons_train.jsonl", "person-specific", image_size=32)
    test = load_manifest(small_world / "persons_test.jsonl", "person-specific", image_size=32, oracle_mode=True)
    return source, persons, test
