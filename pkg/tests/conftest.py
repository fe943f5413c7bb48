"""Shared fixtures for the test suite.

Everything here is desk-scale: tiny canvases, short clips, narrow embeddings.
The expensive trained-model fixtures live in test_acceptance.py because only
the acceptance suite needs them.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch

from fewvod.config import RunConfig, default_config
from fewvod.data import GeneratorConfig, generate_dataset


def make_tiny_config(seed: int = 0) -> RunConfig:
    cfg = default_config()
    cfg.seed = seed
    cfg.encoder.patch_size = 8
    cfg.encoder.embed_dim = 32
    cfg.data = GeneratorConfig(
        canvas_size=32,
        n_way=2,
        k_shot=1,
        num_frames=4,
        videos_per_episode=1,
        objects_per_video=2,
        num_train_episodes=2,
        num_eval_episodes=1,
        occluder_prob=0.5,
        seed=seed,
    )
    cfg.optim.epochs = 1
    cfg.validate()
    return cfg


@pytest.fixture
def tiny_config():
    return make_tiny_config()


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(make_tiny_config().data)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


def random_corner_boxes(rng: np.random.Generator, n: int) -> torch.Tensor:
    """Random valid corner boxes in [0,1]^4 as float64 tensors."""
    pts = rng.uniform(0.0, 1.0, size=(n, 4))
    x1 = np.minimum(pts[:, 0], pts[:, 2])
    x2 = np.maximum(pts[:, 0], pts[:, 2])
    y1 = np.minimum(pts[:, 1], pts[:, 3])
    y2 = np.maximum(pts[:, 1], pts[:, 3])
    return torch.from_numpy(np.stack([x1, y1, x2, y2], axis=1))
