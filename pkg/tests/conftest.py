import os

import numpy as np
import pytest

from conceptcells import netcore, streams

MNIST_DIR = os.environ.get("CONCEPTCELLS_MNIST", "/root/data/mnist")
CIFAR_DIR = os.environ.get("CONCEPTCELLS_CIFAR10", "/root/data/cifar10")


def have_mnist() -> bool:
    return os.path.exists(os.path.join(MNIST_DIR, "train-images-idx3-ubyte"))


def have_cifar() -> bool:
    return os.path.exists(os.path.join(CIFAR_DIR, "data_batch_1.bin"))


@pytest.fixture(scope="session")
def mnist():
    if not have_mnist():
        pytest.skip(f"MNIST not found under {MNIST_DIR}")
    return streams.load_mnist(MNIST_DIR)


def tiny_dataset(per_class=(3, 5, 4, 6), dims=4, seed=0) -> streams.Dataset:
    rng = np.random.default_rng(seed)
    y = np.concatenate([np.full(n, c) for c, n in enumerate(per_class)]).astype(np.int64)
    x = rng.standard_normal((len(y), dims)).astype(np.float32)
    return streams.Dataset(x, y, np.zeros(1, np.float32), np.ones(1, np.float32), len(per_class))


def small_mlp(in_features=6, hidden=8, classes=4):
    return [netcore.Dense(in_features, hidden), netcore.ReLU(), netcore.Dense(hidden, classes)]


def small_cnn(channels=2, size=8, classes=3):
    return [netcore.Conv(channels, 3, 3, 3, padding=1), netcore.ReLU(), netcore.MaxPool(2, 2),
            netcore.Conv(3, 4, 3, 3, stride=1), netcore.ReLU(), netcore.Flatten(),
            netcore.Dense(4 * (size // 2 - 2) ** 2, classes)]


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
