import os
from pathlib import Path

import numpy as np
import pytest

from merkleguard.checkpoint import Checkpoint, DenseLayer, load_mnist_split

DATA_DIR = Path(__file__).parent / "data"
MNIST_DIR = Path(os.environ.get("MERKLEGUARD_MNIST_DIR", "/root/data/mnist"))

# name -> "PASS"/"FAIL" (+ detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict[str, str] = {}


def random_model(rng, sizes, scale=1.0) -> Checkpoint:
    layers = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        w = (rng.standard_normal((fan_out, fan_in)) * scale).astype(np.float32)
        b = (rng.standard_normal(fan_out) * scale).astype(np.float32)
        layers.append(DenseLayer(w, b))
    return Checkpoint(tuple(layers))


def have_mnist() -> bool:
    return all(
        any((MNIST_DIR / n).is_file() for n in (stem, stem.replace("-idx", ".idx")))
        for stem in (
            "train-images-idx3-ubyte",
            "train-labels-idx1-ubyte",
            "t10k-images-idx3-ubyte",
            "t10k-labels-idx1-ubyte",
        )
    )


requires_mnist = pytest.mark.skipif(
    not have_mnist(), reason=f"MNIST IDX files not found in {MNIST_DIR} (set MERKLEGUARD_MNIST_DIR)"
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_train():
    return load_mnist_split(MNIST_DIR, "train")


@pytest.fixture(scope="session")
def mnist_test():
    return load_mnist_split(MNIST_DIR, "test")


@pytest.fixture(scope="session")
def mnist_model(mnist_train):
    from merkleguard.nn import TrainConfig, train

    return train(mnist_train, TrainConfig())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, line in ACCEPTANCE_RESULTS.items():
        terminalreporter.write_line(f"{name}: {line}")
