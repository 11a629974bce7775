import numpy as np
import pytest

from firesense.data import Sample, compute_norm_stats, generate_synthetic, preprocess_x
from firesense.models import ModelConfig, build
from firesense.rng import rng_for


@pytest.fixture(scope="session")
def tiny_ds():
    # 16x16 patches keep full-model tests fast; treated as read-only
    return generate_synthetic(30, seed=3, size=16)


@pytest.fixture(scope="session")
def tiny_stats(tiny_ds):
    return compute_norm_stats([
        preprocess_x(s.x, 0.8, 0.4) for s in tiny_ds.samples
    ])


@pytest.fixture
def rng():
    return rng_for(99, "tests")


@pytest.fixture
def small_model():
    # fresh per test: forward in train mode mutates batchnorm buffers
    return build(ModelConfig(arch="FireSenseNet", width_mult=0.25), seed=1)


def make_sample(x, y, sid=0):
    return Sample(id=sid, x=np.asarray(x, dtype=np.float32),
                  y=np.asarray(y, dtype=np.int8))
