import numpy as np
import pytest

from cetx.data import generate_synthetic
from cetx.model import BlockSpec, ExitHeadSpec, ModelConfig, build_network


def small_config(channels=2, length=32, classes=3, blocks=(4, 6), seed=0, dropout=0.0, l2=1e-4):
    return ModelConfig(
        channels_in=channels,
        length_in=length,
        num_classes=classes,
        blocks=tuple(BlockSpec(filters=f, kernel=4, pool=4, dropout_rate=dropout) for f in blocks),
        head=ExitHeadSpec(hidden_units=8, num_classes=classes),
        l2_rate=l2,
        seed=seed,
    )


@pytest.fixture
def tiny_net():
    return build_network(small_config())


@pytest.fixture
def tiny_dataset():
    return generate_synthetic(num_classes=3, channels=2, length=32, per_class=8, groups=4, seed=5)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))
