"""Dense reference learners: finetune, reservoir replay and iid joint training."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import netcore
from .netcore import DenseCell, NetworkParams, TrainConfig


@dataclass
class StepReport:
    loss: float
    batch_accuracy: float


class ReplayBuffer:
    """Classic reservoir: keeps each of the ``n`` samples seen with probability ``M / n``."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = int(capacity)
        self.seen = 0
        self.size = 0
        self.rng = np.random.default_rng([seed, 0x5EED])
        self.x: np.ndarray | None = None
        self.y: np.ndarray | None = None

    def __len__(self) -> int:
        return self.size

    def insert(self, x: np.ndarray, y: int) -> None:
        self.seen += 1
        if self.capacity == 0:
            return
        if self.x is None:
            self.x = np.empty((self.capacity,) + x.shape, dtype=x.dtype)
            self.y = np.empty(self.capacity, dtype=np.int64)
        if self.size < self.capacity:
            slot = self.size
            self.size += 1
        else:
            slot = int(self.rng.integers(self.seen))
            if slot >= self.capacity:
                return
        self.x[slot] = x
        self.y[slot] = y

    def sample(self, k: int) -> tuple[np.ndarray, np.ndarray] | None:
        k = min(k, self.size)
        if k == 0:
            return None
        idx = self.rng.choice(self.size, size=k, replace=False)
        return self.x[idx], self.y[idx]


def reservoir_insert(buffer: ReplayBuffer, x: np.ndarray, y: int) -> ReplayBuffer:
    buffer.insert(x, y)
    return buffer


def finetune_step(params: NetworkParams, cell: DenseCell, x: np.ndarray, y: np.ndarray,
                  config: TrainConfig, num_classes: int | None = None) -> StepReport:
    """Plain SGD on every weight."""
    loss, acc = netcore.train_step(params, cell, x, y, config, num_classes)
    return StepReport(loss, acc)


def replay_step(params: NetworkParams, cell: DenseCell, buffer: ReplayBuffer, x: np.ndarray,
                y: np.ndarray, config: TrainConfig, num_classes: int | None = None) -> StepReport:
    """One step on the incoming batch plus up to ``len(x)`` buffered samples.

    The reported accuracy covers the incoming samples only.
    """
    old = buffer.sample(len(x))
    if old is None:
        xs, ys = x, y
    else:
        xs = np.concatenate([x, old[0].astype(x.dtype, copy=False)])
        ys = np.concatenate([y, old[1]])
    logits, cache = netcore.forward(params, cell, xs)
    loss, grad = netcore.cross_entropy(logits, ys, num_classes)
    grads = netcore.backward(params, cell, cache, grad)
    netcore.sgd_step(params, cell, grads, config)
    acc = float(np.mean(np.argmax(logits[:len(x)], axis=1) == y)) if len(x) else 0.0
    for xi, yi in zip(x, y):
        buffer.insert(xi, int(yi))
    return StepReport(loss, acc)


def iid_joint(params: NetworkParams, cell: DenseCell, x: np.ndarray, y: np.ndarray, epochs: int,
              batch_size: int, config: TrainConfig, seed: int = 0,
              num_classes: int | None = None) -> list[StepReport]:
    """Shuffled mini-batch SGD over all classes at once for ``epochs`` passes."""
    rng = np.random.default_rng([seed, 0x11D])
    reports = []
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            reports.append(finetune_step(params, cell, x[idx], y[idx], config, num_classes))
    return reports
