import os
from pathlib import Path

import numpy as np
import pytest

from bitgrad import data as data_mod
from bitgrad import synth

# Where the offline digit corpus lives. Real MNIST files under
# BITGRAD_DATA_DIR take precedence; otherwise a deterministic font-rendered
# corpus in the same IDX format is generated once and cached.
SYNTH_CACHE = Path(os.environ.get("BITGRAD_SYNTH_CACHE", "/tmp/bitgrad-synth"))


def _has_real_mnist(root: Path) -> bool:
    return all((root / n).exists() or (root / (n + ".gz")).exists()
               for pair in data_mod.MNIST_FILES.values() for n in pair)


@pytest.fixture(scope="session")
def mnist_dir() -> Path:
    env = os.environ.get("BITGRAD_DATA_DIR")
    if env and _has_real_mnist(Path(env)):
        return Path(env)
    return synth.ensure_corpus(SYNTH_CACHE)


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    return data_mod.load_mnist(mnist_dir)


@pytest.fixture(scope="session")
def mnist_subset(mnist):
    """Small deterministic slice for fast smoke training."""
    train, test = mnist
    tr = data_mod.Dataset(images=train.images[:512], labels=train.labels[:512],
                          split="train", mean=train.mean, std=train.std)
    te = data_mod.Dataset(images=test.images[:512], labels=test.labels[:512],
                          split="test", mean=test.mean, std=test.std)
    return tr, te


def rng(seed=0):
    return np.random.default_rng(seed)
