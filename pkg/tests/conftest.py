import numpy as np
import pytest

from snnc.network import (Conv, Flatten, FullyConnected, MeanPool,
                          ModelConfig, ReLU)


def tiny_config() -> ModelConfig:
    """conv 1->2 3x3, mean-pool 2x2, FC->10 on an 8x8 input."""
    return ModelConfig((1, 8, 8),
                       (Conv(2, 3, 3), ReLU(), MeanPool(2, 2), Flatten(),
                        FullyConnected(10)), 10)


def affine_config() -> ModelConfig:
    """Two stacked fully connected layers, no nonlinearity."""
    return ModelConfig((1, 1, 6), (FullyConnected(5), FullyConnected(3)), 3)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def onehot(k: int, n: int = 10) -> np.ndarray:
    y = np.zeros(n)
    y[k] = 1.0
    return y
