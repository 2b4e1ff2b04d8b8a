import numpy as np
import pytest

from camaudit.model import ModelConfig, build_model


def micro_config(loss_kind="am-softmax", seed=3):
    """Smallest config that still exercises every layer kind."""
    return ModelConfig(input_freq_bins=8, input_frames=12, base_channels=4,
                       block_counts=[1, 1, 1, 1], strides=[1, 2, 2, 2],
                       embedding_dim=8, num_classes=5,
                       loss_kind=loss_kind, seed=seed)


@pytest.fixture
def micro_model():
    return build_model(micro_config())


@pytest.fixture
def micro_model_softmax():
    return build_model(micro_config(loss_kind="softmax", seed=4))


def random_input(rng, freq=8, frames=12):
    """Non-negative energies shaped like a spectrogram."""
    return rng.uniform(0.0, 1.0, size=(freq, frames))
