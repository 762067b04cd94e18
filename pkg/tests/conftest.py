"""Shared fixtures.

The trained reference checkpoint is expensive (~10 min CPU), so it is cached
under tests/_cache keyed by its training configuration. Delete that
directory after changing model or training code to force a fresh run.
"""

from pathlib import Path

import pytest

from videdit.denoiser import ModelConfig, build_toy_unet
from videdit.schedule import make_schedule
from videdit.storage import config_hash, load_checkpoint, save_checkpoint
from videdit.toyworld import ToyTextEncoder, all_specs, make_dataset, train_toy

CACHE_DIR = Path(__file__).parent / "_cache"

TRAIN_SETTINGS = {
    "model": "default",
    "train_steps": 2500,
    "lr": 2e-3,
    "batch_size": 16,
    "seed": 0,
    "scene_seed": 0,
    "schedule": [1000, 1e-4, 2e-2],
}


@pytest.fixture(scope="session")
def trained_setup():
    """Reference checkpoint: default model trained on the full scene grid."""
    config = ModelConfig()
    schedule = make_schedule(
        TRAIN_SETTINGS["schedule"][0],
        TRAIN_SETTINGS["schedule"][1],
        TRAIN_SETTINGS["schedule"][2],
        50,
    )
    key = config_hash(TRAIN_SETTINGS)[:16]
    path = CACHE_DIR / f"trained_{key}.npz"
    if not path.exists():
        model = build_toy_unet(config, seed=TRAIN_SETTINGS["seed"])
        encoder = ToyTextEncoder(dim=config.text_dim, seq_len=config.text_len, seed=0)
        dataset = make_dataset(all_specs(), seed=TRAIN_SETTINGS["scene_seed"])
        train_toy(
            model,
            dataset,
            schedule,
            encoder,
            steps=TRAIN_SETTINGS["train_steps"],
            lr=TRAIN_SETTINGS["lr"],
            seed=TRAIN_SETTINGS["seed"],
            batch_size=TRAIN_SETTINGS["batch_size"],
        )
        CACHE_DIR.mkdir(exist_ok=True)
        save_checkpoint(path, model, encoder)
    model, encoder = load_checkpoint(path)
    return model, encoder
