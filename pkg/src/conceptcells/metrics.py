"""Accuracy matrix, average accuracy/forgetting and deterministic run exports."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class UsageError(RuntimeError):
    pass


class MetricsMatrix:
    """``a[i, j]``: accuracy on stream ``j`` after training through stream ``i`` (0-based).

    Unrecorded entries hold NaN.
    """

    def __init__(self, num_streams: int):
        if num_streams < 1:
            raise ValueError("num_streams must be >= 1")
        self.num_streams = num_streams
        self.a = np.full((num_streams, num_streams), np.nan)
        self.recorded = [False] * num_streams

    def record_row(self, i: int, accuracies: Sequence[float]) -> None:
        if not 0 <= i < self.num_streams:
            raise UsageError(f"row {i} outside 0..{self.num_streams - 1}")
        if self.recorded[i]:
            raise UsageError(f"row {i} already recorded")
        acc = np.asarray(accuracies, dtype=np.float64)
        if acc.ndim != 1 or not 1 <= acc.size <= self.num_streams:
            raise UsageError(f"row {i} needs between 1 and {self.num_streams} entries")
        if np.any((acc < 0) | (acc > 1)):
            raise UsageError("accuracies must lie in [0, 1]")
        self.a[i, :acc.size] = acc
        self.recorded[i] = True

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]], num_streams: int | None = None) -> "MetricsMatrix":
        m = cls(num_streams or len(rows))
        for i, row in enumerate(rows):
            m.record_row(i, row)
        return m

    def last_row(self) -> np.ndarray:
        if not self.recorded[-1]:
            raise UsageError("final row not recorded")
        return self.a[-1, :self.num_streams]

    def curve(self) -> list[float]:
        """Mean accuracy over the streams seen so far, after each recorded stream."""
        out = []
        for i in range(self.num_streams):
            row = self.a[i, :i + 1]
            out.append(float(np.mean(row)) if self.recorded[i] and not np.isnan(row).any() else math.nan)
        return out


def average_accuracy(matrix: MetricsMatrix) -> float:
    return float(np.mean(matrix.last_row()))


def average_forgetting(matrix: MetricsMatrix) -> float:
    """Mean over streams ``j < S`` of ``max_{k<S} a[k, j] - a[S, j]``.

    NaN when there is a single stream or an earlier row was never recorded.
    """
    S = matrix.num_streams
    last = matrix.last_row()
    if S < 2:
        return math.nan
    gaps = []
    for j in range(S - 1):
        history = matrix.a[j:S - 1, j]
        if np.isnan(history).any():
            return math.nan
        gaps.append(float(np.max(history)) - float(last[j]))
    return float(np.mean(gaps))


@dataclass
class CellHistory:
    """Per-cell accuracy snapshots taken once a cell is frozen.

    ``first[c]`` is the cell-by-stream accuracy row seen the first time cell ``c``
    was evaluated as frozen; forgetting compares it against the final row.
    """

    first: dict[int, np.ndarray] = field(default_factory=dict)

    def observe(self, cells_matrix: np.ndarray, num_frozen: int) -> None:
        for c in range(num_frozen):
            self.first.setdefault(c, np.array(cells_matrix[c], dtype=np.float64))

    def forgetting(self, final: np.ndarray) -> float:
        """Largest drop of any frozen cell on any stream; 0.0 when nothing was frozen."""
        drops = [float(np.max(row - final[c])) for c, row in self.first.items()]
        return max(drops) if drops else 0.0


# -- exports ----------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return "" if math.isnan(value) else repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=",", lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return (rows[0], rows[1:]) if rows else ([], [])


def _json_clean(obj):
    if isinstance(obj, dict):
        return {k: _json_clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_json_clean(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


TRACE_HEADER = ("batch_index", "loss", "batch_accuracy", "window_mean", "decision", "active_cell")


def export_run(out_dir: str, matrix: MetricsMatrix, cells_matrix: np.ndarray, summary: dict,
               trace: Sequence[Sequence]) -> dict[str, str]:
    """Write matrix.csv, curve.csv, cells_matrix.csv, summary.json and trace.csv."""
    os.makedirs(out_dir, exist_ok=True)
    S = matrix.num_streams
    paths = {name: os.path.join(out_dir, name) for name in
             ("matrix.csv", "curve.csv", "cells_matrix.csv", "summary.json", "trace.csv")}
    write_csv(paths["matrix.csv"], ["after_stream"] + [f"stream_{j + 1}" for j in range(S)],
              ([i + 1] + list(matrix.a[i]) for i in range(S)))
    write_csv(paths["curve.csv"], ["after_stream", "avg_accuracy"],
              ([i + 1, v] for i, v in enumerate(matrix.curve())))
    cells_matrix = np.atleast_2d(np.asarray(cells_matrix, dtype=np.float64))
    write_csv(paths["cells_matrix.csv"], ["cell"] + [f"stream_{j + 1}" for j in range(cells_matrix.shape[1])],
              ([c + 1] + list(row) for c, row in enumerate(cells_matrix)))
    write_json(paths["summary.json"], summary)
    write_csv(paths["trace.csv"], TRACE_HEADER, trace)
    return paths


def load_matrix(path: str) -> MetricsMatrix:
    header, rows = read_csv(path)
    S = len(header) - 1
    m = MetricsMatrix(S)
    for r in rows:
        vals = [float(v) for v in r[1:] if v != ""]
        if vals:
            m.record_row(int(r[0]) - 1, vals)
    return m
