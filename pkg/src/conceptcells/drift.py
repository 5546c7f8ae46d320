"""Accuracy-collapse drift detector."""
from __future__ import annotations

import math
from collections import deque
from enum import Enum

from .netcore import ConfigurationError, InputError


class Decision(str, Enum):
    CONTINUE = "continue"
    DRIFT = "drift"


class DriftDetector:
    """Fires when a batch accuracy falls to ``threshold`` times the mean of the previous ``window``.

    Nothing fires until the window is full, so a freshly allocated cell gets ``window``
    batches of warm-up.  The window mean never includes the batch being judged.

    With ``skip_zero_mean`` (the default) a window averaging exactly zero never
    fires: a cell that has not yet classified anything cannot drop below it.
    Passing False restores the bare ``acc <= mean * t`` comparison, under which a
    zero-accuracy batch after a zero window counts as drift.
    """

    def __init__(self, window_size: int = 10, threshold: float = 0.5, skip_zero_mean: bool = True):
        if window_size < 1:
            raise ConfigurationError("window_size must be >= 1")
        if not 0 < threshold <= 1:
            raise ConfigurationError("threshold must lie in (0, 1]")
        self.window_size = int(window_size)
        self.threshold = float(threshold)
        self.skip_zero_mean = bool(skip_zero_mean)
        self.buffer: deque[float] = deque(maxlen=self.window_size)
        self.batches_observed = 0
        self.last_mean: float | None = None

    def window_mean(self) -> float | None:
        if not self.buffer:
            return None
        return math.fsum(self.buffer) / len(self.buffer)

    def observe(self, batch_accuracy: float) -> Decision:
        if not 0.0 <= batch_accuracy <= 1.0 or batch_accuracy != batch_accuracy:
            raise InputError(f"batch accuracy must lie in [0, 1], got {batch_accuracy}")
        self.batches_observed += 1
        mean = self.window_mean()
        self.last_mean = mean
        armed = len(self.buffer) == self.window_size and not (self.skip_zero_mean and mean == 0)
        if armed and batch_accuracy <= mean * self.threshold:
            self.buffer.clear()
            self.buffer.append(float(batch_accuracy))
            return Decision.DRIFT
        self.buffer.append(float(batch_accuracy))
        return Decision.CONTINUE

    def reset(self) -> None:
        self.buffer.clear()

    def state_dict(self) -> dict:
        return {"window_size": self.window_size, "threshold": self.threshold,
                "skip_zero_mean": self.skip_zero_mean, "buffer": list(self.buffer),
                "batches_observed": self.batches_observed}

    @classmethod
    def from_state(cls, state: dict) -> "DriftDetector":
        det = cls(state["window_size"], state["threshold"], state.get("skip_zero_mean", True))
        det.buffer.extend(state["buffer"])
        det.batches_observed = state["batches_observed"]
        return det
