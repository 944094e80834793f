import os
from pathlib import Path

import numpy as np
import pytest

from advlab import tensor as T

MNIST_DIR = Path(os.environ.get("ADVLAB_MNIST_DIR", "/root/data/mnist"))
FASHION_DIR = Path(os.environ.get("ADVLAB_FASHION_DIR", "/root/data/fashion"))

# acceptance results collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_dir():
    if not (MNIST_DIR / "train-images-idx3-ubyte").exists() and not (MNIST_DIR / "train-images-idx3-ubyte.gz").exists():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR} (set ADVLAB_MNIST_DIR)")
    return MNIST_DIR


@pytest.fixture(scope="session")
def identity_autoencoder(mnist_dir):
    """Default autoencoder trained on (x, x) pairs from a 1,000-image MNIST subset.

    Returns the model, its history and the validation split.
    """
    from advlab import train as TR
    from advlab.data import load_corpus, split, stratified_subset
    from advlab.nn import AutoencoderSpec, build_autoencoder

    corpus = stratified_subset(load_corpus(mnist_dir, "mnist", "train"), 1000)
    tr, va = split(corpus, seed=0)
    model = build_autoencoder(AutoencoderSpec(), np.random.default_rng(0))
    # 834 training images give 14 steps per epoch at batch 64; batch 16 converges in a few minutes
    cfg = TR.TrainConfig(max_epochs=20, batch_size=16, patience=5, seed=0)
    model, hist = TR.train_autoencoder(model, TR.PairedSet.identity(tr), TR.PairedSet.identity(va), cfg)
    return model, hist, va


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
