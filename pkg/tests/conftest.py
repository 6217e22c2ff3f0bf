import numpy as np
import pytest

from progpcc.config import ModelConfig
from progpcc.model import CodecModel
from progpcc.training import TrainConfig, train


@pytest.fixture(scope="session")
def trained_checkpoint(tmp_path_factory) -> str:
    """A briefly trained default-architecture checkpoint for interface tests."""
    path = tmp_path_factory.mktemp("ckpt") / "toy.ckpt"
    config = TrainConfig(epochs=2, batch_size=2, n_clouds=4,
                         points_per_cloud=300, bit_depth=5, seed=1,
                         checkpoint_path=str(path))
    train(config, CodecModel(ModelConfig(), seed=1))
    return str(path)


@pytest.fixture(scope="session")
def sample_points() -> np.ndarray:
    rng = np.random.default_rng(33)
    sphere = rng.normal(size=(400, 3))
    sphere /= np.linalg.norm(sphere, axis=1, keepdims=True)
    return sphere * 40.0 + 50.0
