"""Dataset ingestion, scenario construction and single-pass batch iteration."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .netcore import ConfigurationError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


class FormatError(ValueError):
    """Malformed dataset file; the message carries the byte offset."""


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ConfigurationError("features and labels differ in count")

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.mean, self.std, self.num_classes)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _read(path: str) -> bytes:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        return fh.read()


def _header(buf: bytes, path: str, magic: int, ndims: int) -> tuple:
    need = 4 * (1 + ndims)
    if len(buf) < need:
        raise FormatError(f"{path}: truncated header at byte offset {len(buf)} (need {need} bytes)")
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x} at byte offset 0 (expected 0x{magic:08x})")
    return struct.unpack(f">{ndims}I", buf[4:need])


def read_idx_images(path: str) -> np.ndarray:
    buf = _read(path)
    n, rows, cols = _header(buf, path, IDX_IMAGES_MAGIC, 3)
    expected = 16 + n * rows * cols
    if len(buf) < expected:
        raise FormatError(f"{path}: truncated pixel data at byte offset {len(buf)} (expected {expected} bytes)")
    return np.frombuffer(buf, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows, cols)


def read_idx_labels(path: str) -> np.ndarray:
    buf = _read(path)
    (n,) = _header(buf, path, IDX_LABELS_MAGIC, 1)
    if len(buf) < 8 + n:
        raise FormatError(f"{path}: truncated label data at byte offset {len(buf)} (expected {8 + n} bytes)")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8)


def _standardize(x: np.ndarray, mean, std, axes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if mean is None:
        mean = x.mean(axis=axes, keepdims=True)
        std = x.std(axis=axes, keepdims=True)
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    return ((x - mean) / std).astype(np.float32), mean, std


def load_idx(images_path: str, labels_path: str, mean=None, std=None, flatten: bool = True) -> Dataset:
    """Parse an IDX image/label pair, scale to [0, 1] and standardize.

    Without ``mean``/``std`` the statistics are computed from these files (train split);
    pass the train statistics when loading a test split.
    """
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise FormatError(f"{labels_path}: {len(labels)} labels at byte offset 4 but {len(images)} images")
    x = images.astype(np.float32) / 255.0
    x = x.reshape(len(x), -1) if flatten else x[:, None]
    x, mean, std = _standardize(x, mean, std, axes=None)
    return Dataset(x, labels.astype(np.int64), mean, std, int(labels.max()) + 1 if len(labels) else 0)


def load_cifar10_bin(paths: Sequence[str], mean=None, std=None) -> Dataset:
    """Read CIFAR-10 binary batches (1 label byte + 3072 channel-planar pixel bytes per record)."""
    chunks = []
    for path in paths:
        buf = _read(path)
        if not buf or len(buf) % CIFAR_RECORD:
            raise FormatError(f"{path}: size {len(buf)} is not a multiple of {CIFAR_RECORD} "
                              f"(partial record at byte offset {len(buf) - len(buf) % CIFAR_RECORD})")
        chunks.append(np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    rec = np.concatenate(chunks)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"label {labels[bad]} out of range at byte offset {bad * CIFAR_RECORD}")
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    x, mean, std = _standardize(x, mean, std, axes=(0, 2, 3))
    return Dataset(x, labels, mean, std, 10)


def load_mnist(directory: str, flatten: bool = True) -> tuple[Dataset, Dataset]:
    train = load_idx(os.path.join(directory, "train-images-idx3-ubyte"),
                     os.path.join(directory, "train-labels-idx1-ubyte"), flatten=flatten)
    test = load_idx(os.path.join(directory, "t10k-images-idx3-ubyte"),
                    os.path.join(directory, "t10k-labels-idx1-ubyte"),
                    mean=train.mean, std=train.std, flatten=flatten)
    test.num_classes = train.num_classes
    return train, test


def load_cifar10(directory: str) -> tuple[Dataset, Dataset]:
    train = load_cifar10_bin([os.path.join(directory, f"data_batch_{i}.bin") for i in range(1, 6)])
    test = load_cifar10_bin([os.path.join(directory, "test_batch.bin")], train.mean, train.std)
    return train, test


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

@dataclass
class ScenarioSpec:
    kind: str
    streams: list[list[int]]
    counts: list[int]
    batch_size: int = 10
    seed: int = 0
    requested_counts: list[int] = field(default_factory=list)

    def __post_init__(self):
        flat = [c for s in self.streams for c in s]
        if len(flat) != len(set(flat)):
            raise ConfigurationError("stream class sets must be pairwise disjoint")
        if len(self.counts) != len(self.streams):
            raise ConfigurationError("one count per stream required")

    @property
    def num_streams(self) -> int:
        return len(self.streams)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioSpec":
        return cls(**json.loads(text))


def _class_partition(num_classes: int, num_streams: int, classes_per_stream: int,
                     shuffle_classes: bool, seed: int) -> list[list[int]]:
    if num_streams < 1 or classes_per_stream < 1:
        raise ConfigurationError("need at least one stream and one class per stream")
    if num_streams * classes_per_stream > num_classes:
        raise ConfigurationError(
            f"{num_streams} streams x {classes_per_stream} classes exceeds {num_classes} classes")
    order = np.arange(num_classes)
    if shuffle_classes:
        order = np.random.default_rng(seed).permutation(num_classes)
    return [sorted(int(c) for c in order[s * classes_per_stream:(s + 1) * classes_per_stream])
            for s in range(num_streams)]


def make_split(dataset: Dataset, num_streams: int = 5, classes_per_stream: int = 2, seed: int = 0,
               batch_size: int = 10, shuffle_classes: bool = False) -> ScenarioSpec:
    """Disjoint class groups in label order; every sample of a class lands in its stream.

    ``num_streams=1`` with all classes in one group is joint (iid) training.
    """
    if num_streams == 1 and classes_per_stream < dataset.num_classes:
        classes_per_stream = dataset.num_classes
    streams = _class_partition(dataset.num_classes, num_streams, classes_per_stream, shuffle_classes, seed)
    counts = [int(np.isin(dataset.y, s).sum()) for s in streams]
    return ScenarioSpec("balanced", streams, counts, batch_size, seed, list(counts))


def log_spaced_counts(n_min: int, n_max: int, num_streams: int) -> list[int]:
    """``round(n_min * (n_max / n_min) ** ((s - 1) / (S - 1)))`` for s = 1..S."""
    if num_streams == 1:
        return [int(n_min)]
    return [int(round(n_min * (n_max / n_min) ** (s / (num_streams - 1)))) for s in range(num_streams)]


def _allocate(available: Sequence[int], total: int) -> list[int]:
    """Split ``total`` as evenly as possible across classes, topping up from classes with slack."""
    k = len(available)
    take = [0] * k
    remaining = total
    open_ = [i for i in range(k) if available[i] > 0]
    while remaining > 0 and open_:
        share, extra = divmod(remaining, len(open_))
        nxt = []
        for rank, i in enumerate(open_):
            want = share + (1 if rank < extra else 0)
            got = min(want, available[i] - take[i])
            take[i] += got
            remaining -= got
            if take[i] < available[i]:
                nxt.append(i)
        open_ = nxt
    return take


def make_imbalanced(dataset: Dataset, num_streams: int, classes_per_stream: int, n_min: int, n_max: int,
                    direction: str = "ascending", seed: int = 0, batch_size: int = 10,
                    allow_shortfall: bool = False) -> ScenarioSpec:
    """Log-spaced per-stream train counts, reversed for ``descending``.

    A stream that cannot supply its count raises :class:`ConfigurationError`, unless
    ``allow_shortfall`` is set, in which case the stream uses every sample it has.
    """
    if direction not in ("ascending", "descending"):
        raise ConfigurationError("direction must be 'ascending' or 'descending'")
    if not 0 < n_min <= n_max:
        raise ConfigurationError("need 0 < n_min <= n_max")
    streams = _class_partition(dataset.num_classes, num_streams, classes_per_stream, False, seed)
    requested = log_spaced_counts(n_min, n_max, num_streams)
    if direction == "descending":
        requested = requested[::-1]
    counts = []
    for s, n in zip(streams, requested):
        available = int(np.isin(dataset.y, s).sum())
        if n > available:
            if not allow_shortfall:
                raise ConfigurationError(
                    f"stream {s} needs {n} samples but only {available} are available")
            n = available
        counts.append(n)
    return ScenarioSpec(direction, streams, counts, batch_size, seed, requested)


def stream_indices(scenario: ScenarioSpec, dataset: Dataset) -> list[np.ndarray]:
    """Deterministic train-sample indices of each stream, in presentation order."""
    out = []
    for s, (classes, count) in enumerate(zip(scenario.streams, scenario.counts)):
        rng = np.random.default_rng([scenario.seed, s])
        per_class = [np.flatnonzero(dataset.y == c) for c in classes]
        take = _allocate([len(p) for p in per_class], count)
        chosen = [np.sort(rng.choice(p, size=t, replace=False)) if t < len(p) else p
                  for p, t in zip(per_class, take)]
        idx = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)
        out.append(idx[rng.permutation(len(idx))])
    return out


def eval_indices(scenario: ScenarioSpec, test: Dataset) -> list[np.ndarray]:
    return [np.flatnonzero(np.isin(test.y, classes)) for classes in scenario.streams]


def batches(scenario: ScenarioSpec, dataset: Dataset,
            streams: Sequence[int] | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(x, y)`` batches stream after stream; no stream identity is exposed."""
    all_idx = stream_indices(scenario, dataset)
    chosen = range(len(all_idx)) if streams is None else streams
    b = scenario.batch_size
    for s in chosen:
        idx = all_idx[s]
        for start in range(0, len(idx), b):
            sel = idx[start:start + b]
            yield dataset.x[sel], dataset.y[sel]


def synthetic_streams(dims: int = 2, num_streams: int = 5, classes_per_stream: int = 2,
                      per_class_count: int = 500, separation: float = 10.0, seed: int = 0,
                      batch_size: int = 10, test_per_class: int = 200) -> tuple[ScenarioSpec, Dataset, Dataset]:
    """Unit-covariance Gaussian blobs, returned as ``(scenario, train, test)``.

    Class means sit on a circle in the first two axes with neighbouring means
    ``separation`` apart (on a line when ``dims == 1``).  Features are then
    standardized with train-split statistics, like the image datasets.
    """
    if separation < 0:
        raise ConfigurationError("separation must be >= 0")
    if dims < 1:
        raise ConfigurationError("dims must be >= 1")
    num_classes = num_streams * classes_per_stream
    rng = np.random.default_rng(seed)
    means = np.zeros((num_classes, dims))
    if dims == 1 or num_classes < 3:
        means[:, 0] = separation * (np.arange(num_classes) - (num_classes - 1) / 2)
    else:
        radius = separation / (2 * np.sin(np.pi / num_classes))
        angle = 2 * np.pi * np.arange(num_classes) / num_classes
        means[:, 0], means[:, 1] = radius * np.cos(angle), radius * np.sin(angle)

    def draw(n):
        y = np.repeat(np.arange(num_classes), n)
        return means[y] + rng.standard_normal((len(y), dims)), y.astype(np.int64)

    xtr, ytr = draw(per_class_count)
    xte, yte = draw(test_per_class)
    xtr, mean, std = _standardize(xtr, None, None, 0)
    xte, _, _ = _standardize(xte, mean, std, 0)
    train = Dataset(xtr, ytr, mean.ravel(), std.ravel(), num_classes)
    test = Dataset(xte, yte, mean.ravel(), std.ravel(), num_classes)
    scenario = make_split(train, num_streams, classes_per_stream, seed, batch_size)
    scenario.kind = "synthetic"
    return scenario, train, test
