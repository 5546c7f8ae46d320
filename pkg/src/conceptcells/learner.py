"""Drift-driven concept-cell learner with recency-weighted ensemble inference."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import netcore
from .drift import Decision, DriftDetector
from .masks import (ConceptCell, SparsityPlan, erk_densities, freeze_cell, masks_from_bytes,
                    masks_to_bytes, sample_cell, saturation)
from .netcore import InputError, NetworkParams, TrainConfig


@dataclass
class BatchReport:
    batch_index: int
    loss: float
    batch_accuracy: float
    drift_fired: bool
    active_cell_index: int
    window_mean: float | None = None


@dataclass
class SerenaState:
    params: NetworkParams
    plan: SparsityPlan
    cells: list[ConceptCell]
    detector: DriftDetector
    num_classes: int
    config: TrainConfig
    seed: int
    batches_seen: int = 0
    drift_batches: list[int] = field(default_factory=list)

    @property
    def active(self) -> ConceptCell:
        return self.cells[-1]

    @property
    def num_cells(self) -> int:
        return len(self.cells)


def create_state(architecture, num_classes: int, density: float = 0.2, window: int = 10,
                 threshold: float = 0.5, config: TrainConfig | None = None, seed: int = 0,
                 input_shape: tuple | None = None, distribution: str = "erk",
                 skip_zero_mean: bool = True) -> SerenaState:
    config = config or TrainConfig()
    params = netcore.init_network(architecture, seed, input_shape, config.precision_mode)
    plan = erk_densities(architecture, density, distribution)
    first = sample_cell(plan, 1, seed, params.dtype, created_at_batch=0)
    return SerenaState(params, plan, [first], DriftDetector(window, threshold, skip_zero_mean), num_classes, config, seed)


def train_batch(state: SerenaState, x: np.ndarray, y: np.ndarray) -> BatchReport:
    """One online step on the active cell, then the drift check.

    On drift the active cell is frozen, a fresh cell is sampled and the detector
    is cleared, so the new cell gets a full warm-up window.
    """
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= state.num_classes):
        raise InputError(f"label out of range [0, {state.num_classes})")
    cell = state.active
    loss, acc = netcore.train_step(state.params, cell, x, y, state.config, state.num_classes)
    decision = state.detector.observe(acc)
    index = state.batches_seen
    state.batches_seen += 1
    fired = decision is Decision.DRIFT
    if fired:
        freeze_cell(state.params, cell)
        state.cells.append(sample_cell(state.plan, cell.cell_index + 1, state.seed,
                                       state.params.dtype, created_at_batch=state.batches_seen))
        state.detector.reset()
        state.drift_batches.append(index)
    return BatchReport(index, loss, acc, fired, cell.cell_index, state.detector.last_mean)


def predict_cell(state: SerenaState, x: np.ndarray, cell_index: int) -> np.ndarray:
    """Logits of one cell (1-based index)."""
    if not 1 <= cell_index <= state.num_cells:
        raise InputError(f"cell index {cell_index} outside 1..{state.num_cells}")
    return netcore.predict_logits(state.params, state.cells[cell_index - 1], x)


def recency_weights(num_cells: int) -> np.ndarray:
    return np.arange(1, num_cells + 1, dtype=np.float64) / num_cells


def combine(logits: Sequence[np.ndarray], weights: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Weighted sum of per-cell logits and its argmax (ties go to the lowest class)."""
    if weights is None:
        weights = recency_weights(len(logits))
    total = sum(w * z.astype(np.float64) for w, z in zip(weights, logits))
    return total, np.argmax(total, axis=-1)


def predict_ensemble(state: SerenaState, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    per_cell = [predict_cell(state, x, i) for i in range(1, state.num_cells + 1)]
    return combine(per_cell)


def run_scenario(state: SerenaState, batch_iter: Iterable[tuple[np.ndarray, np.ndarray]]) -> list[BatchReport]:
    return [train_batch(state, x, y) for x, y in batch_iter]


def evaluate_cells_per_stream(state: SerenaState, test_sets: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Accuracy of every cell (rows) on every stream's test set (columns)."""
    out = np.zeros((state.num_cells, len(test_sets)))
    for i in range(state.num_cells):
        for j, (x, y) in enumerate(test_sets):
            out[i, j] = np.mean(predict_cell(state, x, i + 1).argmax(axis=1) == y) if len(y) else np.nan
    return out


# ---------------------------------------------------------------------------
# checkpoints: magic, u32 version, u32 section count, then (u16 name len, name, u64 len, payload)*
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CCELLCKP"
CHECKPOINT_VERSION = 1


def _npy(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def _from_npy(data: bytes) -> np.ndarray:
    return np.load(io.BytesIO(data), allow_pickle=False)


def save_checkpoint(state: SerenaState, path: str) -> None:
    meta = {
        "architecture": [netcore.layer_to_dict(layer) for layer in state.params.architecture],
        "input_shape": list(state.params.input_shape),
        "init_seed": state.params.init_seed,
        "plan": asdict(state.plan),
        "num_classes": state.num_classes,
        "config": asdict(state.config),
        "seed": state.seed,
        "batches_seen": state.batches_seen,
        "drift_batches": state.drift_batches,
        "detector": state.detector.state_dict(),
        "cells": [{"cell_index": c.cell_index, "created_at_batch": c.created_at_batch} for c in state.cells],
    }
    sections = [("meta", json.dumps(meta, sort_keys=True).encode())]
    for k, w in enumerate(state.params.weights):
        sections.append((f"weight/{k}", _npy(w)))
    sections.append(("frozen", masks_to_bytes(state.params.frozen)))
    for c in state.cells:
        sections.append((f"cell/{c.cell_index}/masks", masks_to_bytes(c.masks)))
        for k, b in enumerate(c.biases):
            sections.append((f"cell/{c.cell_index}/bias/{k}", _npy(b)))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(sections)))
        for name, payload in sections:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def load_checkpoint(path: str) -> SerenaState:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    version, n = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    sections = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2:pos + 2 + ln].decode()
        pos += 2 + ln
        (size,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        if pos + size > len(data):
            raise ValueError(f"{path}: truncated section {name!r}")
        sections[name] = data[pos:pos + size]
        pos += size
    meta = json.loads(sections["meta"])
    arch = [netcore.layer_from_dict(d) for d in meta["architecture"]]
    weights = [_from_npy(sections[f"weight/{k}"]) for k in range(len(meta["plan"]["counts"]))]
    frozen = masks_from_bytes(sections["frozen"])
    index = [i for i, layer in enumerate(arch) if isinstance(layer, netcore.PARAMETRIC)]
    params = NetworkParams(arch, tuple(meta["input_shape"]), weights, frozen, meta["init_seed"], index)
    plan_d = meta["plan"]
    plan = SparsityPlan(plan_d["target_density"], plan_d["densities"], plan_d["counts"],
                        [tuple(s) for s in plan_d["shapes"]], plan_d["bias_sizes"], plan_d["factors"])
    cells = []
    for c in meta["cells"]:
        i = c["cell_index"]
        masks = masks_from_bytes(sections[f"cell/{i}/masks"])
        biases = [_from_npy(sections[f"cell/{i}/bias/{k}"]) for k in range(len(masks))]
        cells.append(ConceptCell(i, masks, biases, c["created_at_batch"]))
    return SerenaState(params, plan, cells, DriftDetector.from_state(meta["detector"]), meta["num_classes"],
                       TrainConfig(**meta["config"]), meta["seed"], meta["batches_seen"], meta["drift_batches"])


def state_saturation(state: SerenaState) -> float:
    return saturation(state.params, state.active)
