import numpy as np
import pytest

from system_guard import validate_experiment_config
from tools.auth_protocol import DeviceRegistry, ServerKeyPair, ServerState
from tools.harness import train_seed
from tools.replay_filter import BloomFilter


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run multi-seed experiment tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_experiment_data(**overrides):
    """Four enrolled devices, two impostors, 16x16 images: trains in seconds."""
    data = {
        "name": "tiny",
        "fleet": {
            "master_seed": 7,
            "lfsr_width": 16,
            "legit": [
                {"kind": "arbiter", "count": 2, "stages": 16, "flip_rate": 0.02},
                {"kind": "sram", "count": 2, "rows": 48, "cols": 48},
            ],
            "impostors": [
                {"kind": "arbiter", "count": 1, "stages": 16, "flip_rate": 0.02},
                {"kind": "sram", "count": 1, "rows": 48, "cols": 48},
            ],
        },
        "image_width": 16,
        "image_height": 16,
        "images_per_device": 10,
        "closed_set": {"epochs": 6, "lr": 0.003, "batch_size": 8, "feature_dim": 16, "pool_grid": 2},
        "gan": {"epochs": 3, "batch_size": 16, "z_dim": 8, "n_g": 16, "n_d": 16},
        "repeats": 2,
    }
    for key, value in overrides.items():
        data[key] = value
    return data


@pytest.fixture
def tiny_config():
    return validate_experiment_config(tiny_experiment_data())


@pytest.fixture(scope="session")
def keypair():
    return ServerKeyPair.generate()


@pytest.fixture(scope="session")
def trained_run(keypair):
    cfg = validate_experiment_config(tiny_experiment_data())
    return train_seed(cfg, cfg.seeds[0], keypair.public_key)


@pytest.fixture
def server_state(trained_run, keypair):
    registry = DeviceRegistry.from_dict(trained_run.registry.to_dict())
    return ServerState(keypair, BloomFilter.for_capacity(1000, 1e-4, seeds=(1, 2)), trained_run.model, registry)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
