"""Run configuration and the load, train, evaluate, export pipeline."""
from __future__ import annotations

import contextlib
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import baselines, learner, metrics, netcore, streams
from .masks import layer_saturation
from .netcore import ConfigurationError

METHODS = ("serena", "finetune", "reservoir", "iid_online", "iid_offline")
SCENARIOS = ("split", "ascending", "descending", "synthetic")
DATASETS = ("mnist", "cifar10", "synthetic")
ARCHITECTURES = ("mlp_400", "cnn_small")
THREADS_ENV = "CONCEPTCELLS_THREADS"


@dataclass
class RunConfig:
    method: str = "serena"
    scenario: str = "split"
    dataset: str = "mnist"
    data_dir: str = "/root/data/mnist"
    architecture: str = "mlp_400"
    sparsity: float = 0.8
    window: int = 10
    threshold: float = 0.5
    learning_rate: float = 1e-2
    weight_decay: float = 5e-4
    batch_size: int = 10
    buffer_size: int = 2000
    seed: int = 0
    output_dir: str = "runs"
    deterministic: bool = False
    precision: str = "fast"
    num_streams: int = 5
    classes_per_stream: int = 2
    n_min: int = 2500
    n_max: int = 12000
    allow_shortfall: bool = True
    distribution: str = "erk"
    skip_zero_mean: bool = True
    offline_epochs: int = 50
    offline_batch_size: int = 128
    synthetic_dims: int = 2
    synthetic_per_class: int = 500
    synthetic_separation: float = 10.0
    eval_cells: bool = True
    save_checkpoint: bool = False
    run_id: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.dataset not in DATASETS:
            raise ConfigurationError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f"architecture must be one of {ARCHITECTURES}")
        if not 0 < self.sparsity < 1:
            raise ConfigurationError(f"sparsity must lie in (0, 1), got {self.sparsity}")
        if not 0 < self.threshold <= 1:
            raise ConfigurationError(f"threshold must lie in (0, 1], got {self.threshold}")
        if self.window < 1:
            raise ConfigurationError(f"window must be >= 1, got {self.window}")
        if (self.scenario == "synthetic") != (self.dataset == "synthetic"):
            raise ConfigurationError("the synthetic scenario goes with the synthetic dataset")

    @property
    def density(self) -> float:
        return 1.0 - self.sparsity

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def with_overrides(self, **overrides) -> "RunConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def resolved_run_id(self) -> str:
        if self.run_id:
            return self.run_id
        payload = {k: v for k, v in self.to_dict().items() if k not in ("output_dir", "run_id")}
        digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:8]
        return f"{self.method}_{self.scenario}_{self.dataset}_seed{self.seed}_{digest}"


def thread_limit(deterministic: bool):
    """Context limiting BLAS threads: one when deterministic, else ``$CONCEPTCELLS_THREADS`` if set."""
    from threadpoolctl import threadpool_limits

    if deterministic:
        return threadpool_limits(limits=1)
    value = os.environ.get(THREADS_ENV)
    if value:
        try:
            n = int(value)
        except ValueError:
            raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
        return threadpool_limits(limits=max(1, n))
    return contextlib.nullcontext()


# -- data -------------------------------------------------------------------

@dataclass
class Workload:
    scenario: streams.ScenarioSpec
    train: streams.Dataset
    test: streams.Dataset
    architecture: list
    input_shape: tuple


def _require_dir(path: str, needed: list[str]) -> None:
    if not os.path.isdir(path):
        raise FileNotFoundError(f"dataset directory not found: {path}")
    for name in needed:
        if not os.path.exists(os.path.join(path, name)):
            raise FileNotFoundError(f"dataset file not found: {os.path.join(path, name)}")


def load_workload(cfg: RunConfig) -> Workload:
    if cfg.dataset == "synthetic":
        scenario, train, test = streams.synthetic_streams(
            cfg.synthetic_dims, cfg.num_streams, cfg.classes_per_stream, cfg.synthetic_per_class,
            cfg.synthetic_separation, cfg.seed, cfg.batch_size)
        arch = netcore.mlp_400(cfg.synthetic_dims, train.num_classes)
        return Workload(scenario, train, test, arch, (cfg.synthetic_dims,))
    if cfg.dataset == "mnist":
        _require_dir(cfg.data_dir, ["train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                                    "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"])
        train, test = streams.load_mnist(cfg.data_dir, flatten=cfg.architecture == "mlp_400")
    else:
        _require_dir(cfg.data_dir, [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"])
        train, test = streams.load_cifar10(cfg.data_dir)
        if cfg.architecture == "mlp_400":
            train = streams.Dataset(train.x.reshape(len(train), -1), train.y, train.mean, train.std)
            test = streams.Dataset(test.x.reshape(len(test), -1), test.y, test.mean, test.std)
    if cfg.architecture == "mlp_400":
        arch = netcore.mlp_400(int(np.prod(train.x.shape[1:])), train.num_classes)
        input_shape = (int(np.prod(train.x.shape[1:])),)
    else:
        c, h, w = train.x.shape[1:]
        arch = netcore.cnn_small(c, train.num_classes, h)
        input_shape = (c, h, w)
    if cfg.scenario == "split":
        scenario = streams.make_split(train, cfg.num_streams, cfg.classes_per_stream, cfg.seed, cfg.batch_size)
    else:
        scenario = streams.make_imbalanced(train, cfg.num_streams, cfg.classes_per_stream, cfg.n_min, cfg.n_max,
                                           cfg.scenario, cfg.seed, cfg.batch_size, cfg.allow_shortfall)
    return Workload(scenario, train, test, arch, input_shape)


# -- learners behind one interface -------------------------------------------

class _SerenaRunner:
    def __init__(self, cfg: RunConfig, work: Workload, tc: netcore.TrainConfig):
        self.state = learner.create_state(work.architecture, work.train.num_classes, cfg.density, cfg.window,
                                          cfg.threshold, tc, cfg.seed, work.input_shape, cfg.distribution,
                                          cfg.skip_zero_mean)

    def step(self, x, y):
        r = learner.train_batch(self.state, x, y)
        return r.loss, r.batch_accuracy, r.window_mean, "drift" if r.drift_fired else "continue", r.active_cell_index

    def predict(self, x):
        return learner.predict_ensemble(self.state, x)[1]


class _DenseRunner:
    def __init__(self, cfg: RunConfig, work: Workload, tc: netcore.TrainConfig):
        self.cfg, self.tc, self.num_classes = cfg, tc, work.train.num_classes
        self.params = netcore.init_network(work.architecture, cfg.seed, work.input_shape, tc.precision_mode)
        self.cell = netcore.dense_cell(self.params)
        self.buffer = baselines.ReplayBuffer(cfg.buffer_size, cfg.seed)

    def step(self, x, y):
        if self.cfg.method == "reservoir":
            r = baselines.replay_step(self.params, self.cell, self.buffer, x, y, self.tc, self.num_classes)
        else:
            r = baselines.finetune_step(self.params, self.cell, x, y, self.tc, self.num_classes)
        return r.loss, r.batch_accuracy, None, "continue", 1

    def predict(self, x):
        return netcore.predict_logits(self.params, self.cell, x).argmax(axis=1)


class _CellLogitCache:
    """Test-set logits per (cell, stream); frozen cells never change, so theirs are computed once."""

    def __init__(self, state, test_sets):
        self.state, self.test_sets = state, test_sets
        self._frozen: dict[tuple[int, int], np.ndarray] = {}

    def logits(self, cell: int, stream: int) -> np.ndarray:
        key = (cell, stream)
        if key in self._frozen:
            return self._frozen[key]
        z = learner.predict_cell(self.state, self.test_sets[stream][0], cell)
        if cell < self.state.num_cells:
            self._frozen[key] = z
        return z

    def evaluate(self, streams_seen: int) -> tuple[list[float], np.ndarray]:
        """Ensemble accuracy on the first ``streams_seen`` streams and every cell's accuracy on all streams."""
        n = self.state.num_cells
        cells = np.full((n, len(self.test_sets)), np.nan)
        ensemble = []
        for j, (_, y) in enumerate(self.test_sets):
            per_cell = [self.logits(i, j) for i in range(1, n + 1)]
            if len(y):
                for i, z in enumerate(per_cell):
                    cells[i, j] = np.mean(z.argmax(axis=1) == y)
            if j < streams_seen:
                ensemble.append(float(np.mean(learner.combine(per_cell)[1] == y)) if len(y) else float("nan"))
        return ensemble, cells


def _accuracy(predict, x, y) -> float:
    return float(np.mean(predict(x) == y)) if len(y) else float("nan")


@dataclass
class RunResult:
    config: RunConfig
    matrix: metrics.MetricsMatrix
    cells_matrix: np.ndarray
    summary: dict
    trace: list = field(default_factory=list)
    state: object = None
    out_dir: str | None = None
    wall_seconds: float = 0.0


def execute(cfg: RunConfig, work: Workload | None = None, on_batch=None) -> RunResult:
    """Train and evaluate in memory; nothing is written.

    ``on_batch(model, trace_row)`` is called after every online step, where ``model``
    is the learner state (serena) or the dense network parameters.
    """
    with thread_limit(cfg.deterministic):
        return _execute(cfg, work, on_batch)


def _execute(cfg: RunConfig, work: Workload | None, on_batch=None) -> RunResult:
    work = work or load_workload(cfg)
    tc = netcore.TrainConfig(cfg.learning_rate, cfg.weight_decay, cfg.batch_size, cfg.precision)
    sc = work.scenario
    S = sc.num_streams
    test_idx = streams.eval_indices(sc, work.test)
    test_sets = [(work.test.x[i], work.test.y[i]) for i in test_idx]
    matrix = metrics.MetricsMatrix(S)
    trace: list = []
    boundaries: list[int] = []
    history = metrics.CellHistory()
    t0 = time.perf_counter()

    if cfg.method in ("iid_online", "iid_offline"):
        runner = _DenseRunner(cfg, work, tc)
        all_idx = np.concatenate(streams.stream_indices(sc, work.train))
        epochs, bs = (1, cfg.batch_size) if cfg.method == "iid_online" else (cfg.offline_epochs, cfg.offline_batch_size)
        reports = baselines.iid_joint(runner.params, runner.cell, work.train.x[all_idx], work.train.y[all_idx],
                                      epochs, bs, tc, cfg.seed, work.train.num_classes)
        trace = [(i, r.loss, r.batch_accuracy, None, "continue", 1) for i, r in enumerate(reports)]
        matrix.a[S - 1, :] = [_accuracy(runner.predict, x, y) for x, y in test_sets]
        matrix.recorded[S - 1] = True
        cells = np.array([matrix.a[S - 1]])
        state = runner.params
    else:
        runner = _SerenaRunner(cfg, work, tc) if cfg.method == "serena" else _DenseRunner(cfg, work, tc)
        cache = _CellLogitCache(runner.state, test_sets) if cfg.method == "serena" else None
        snap = np.zeros((0, S))
        for s in range(S):
            boundaries.append(len(trace))
            model = runner.state if cfg.method == "serena" else runner.params
            for x, y in streams.batches(sc, work.train, [s]):
                trace.append((len(trace),) + tuple(runner.step(x, y)))
                if on_batch is not None:
                    on_batch(model, trace[-1])
            if cache is not None:
                row, snap = cache.evaluate(s + 1)
                matrix.record_row(s, row)
                if cfg.eval_cells:
                    history.observe(snap, runner.state.num_cells - 1)
            else:
                matrix.record_row(s, [_accuracy(runner.predict, x, y) for x, y in test_sets[:s + 1]])
        if cfg.method == "serena":
            state = runner.state
            cells = snap if cfg.eval_cells else np.zeros((0, S))
        else:
            state = runner.params
            cells = np.array([[_accuracy(runner.predict, x, y) for x, y in test_sets]])
    seconds = time.perf_counter() - t0

    summary = {
        "method": cfg.method, "scenario": cfg.scenario, "dataset": cfg.dataset, "seed": cfg.seed,
        "avg_accuracy": metrics.average_accuracy(matrix),
        "avg_forgetting": metrics.average_forgetting(matrix),
        "num_batches": len(trace),
        "stream_counts": sc.counts,
        "stream_classes": sc.streams,
        "stream_start_batches": boundaries,
        "seconds": None if cfg.deterministic else seconds,
    }
    if cfg.method == "serena":
        summary.update({
            "num_cells": state.num_cells,
            "drift_batches": list(state.drift_batches),
            "saturation": learner.state_saturation(state),
            "layer_saturation": layer_saturation(state.params, state.active),
            "per_cell_forgetting": history.forgetting(cells) if cfg.eval_cells else None,
        })
    else:
        summary.update({"num_cells": 1, "drift_batches": [], "saturation": 1.0,
                        "layer_saturation": [1.0] * len(state.weights), "per_cell_forgetting": None})
    return RunResult(cfg, matrix, cells, summary, trace, state, wall_seconds=seconds)


def run(cfg: RunConfig, work: Workload | None = None, on_batch=None) -> RunResult:
    """Execute and write ``<output_dir>/<run_id>/``."""
    result = execute(cfg, work, on_batch)
    out = os.path.join(cfg.output_dir, cfg.resolved_run_id())
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(cfg.to_json())
    metrics.export_run(out, result.matrix, result.cells_matrix, result.summary, result.trace)
    if cfg.deterministic:
        metrics.write_json(os.path.join(out, "timing.json"), {"seconds": result.wall_seconds})
    if cfg.save_checkpoint and cfg.method == "serena":
        learner.save_checkpoint(result.state, os.path.join(out, "state.ckpt"))
    result.out_dir = out
    return result
