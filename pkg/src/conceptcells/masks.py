"""ERK layer-density planning, concept-cell sampling, freezing and saturation."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from .netcore import (PARAMETRIC, Conv, ConfigurationError, LayerSpec, NetworkParams,
                      out_features, weight_shape)


def erk_factor(layer: LayerSpec) -> float:
    """``(n_in + n_out + w + h) / (n_in * n_out * w * h)``; dense layers use ``w = h = 1``."""
    if isinstance(layer, Conv):
        n_in, n_out, kh, kw = layer.in_channels, layer.out_channels, layer.kernel_h, layer.kernel_w
    else:
        n_in, n_out, kh, kw = layer.in_features, layer.out_features, 1, 1
    denom = n_in * n_out * kh * kw
    if denom <= 0:
        raise ConfigurationError(f"zero-size layer {layer!r}")
    return (n_in + n_out + kw + kh) / denom


@dataclass
class SparsityPlan:
    target_density: float
    densities: list[float]
    counts: list[int]
    shapes: list[tuple]
    bias_sizes: list[int]
    factors: list[float] = field(default_factory=list)

    def quotas(self) -> list[int]:
        return [int(round(d * n)) for d, n in zip(self.densities, self.counts)]

    @property
    def planned_density(self) -> float:
        return sum(self.quotas()) / sum(self.counts)


def erk_densities(architecture: Sequence[LayerSpec], target_density: float,
                  distribution: str = "erk") -> SparsityPlan:
    """Per-layer densities ``min(1, eps * r_l)`` with ``eps`` fitted to the global budget.

    Layers whose scaled factor exceeds one are pinned at density 1 and ``eps`` is
    re-solved over the remaining layers until no new layer saturates.
    """
    if not 0 < target_density <= 1:
        raise ConfigurationError(f"target_density must lie in (0, 1], got {target_density}")
    layers = [layer for layer in architecture if isinstance(layer, PARAMETRIC)]
    if not layers:
        raise ConfigurationError("architecture has no parametric layers")
    if distribution not in ("erk", "uniform"):
        raise ConfigurationError(f"unknown density distribution {distribution!r}")
    factors = [erk_factor(layer) if distribution == "erk" else 1.0 for layer in layers]
    shapes = [weight_shape(layer) for layer in layers]
    counts = [int(np.prod(s)) for s in shapes]
    budget = target_density * sum(counts)

    pinned: set[int] = set()
    while True:
        free = [i for i in range(len(layers)) if i not in pinned]
        if not free:
            break
        rest = budget - sum(counts[i] for i in pinned)
        eps = rest / sum(factors[i] * counts[i] for i in free)
        over = {i for i in free if eps * factors[i] > 1.0}
        if not over:
            break
        pinned |= over
    densities = [1.0 if i in pinned else min(1.0, eps * factors[i]) for i in range(len(layers))]
    return SparsityPlan(target_density, densities, counts, shapes,
                        [out_features(layer) for layer in layers], factors)


@dataclass
class ConceptCell:
    cell_index: int
    masks: list[np.ndarray]
    biases: list[np.ndarray]
    created_at_batch: int = 0

    @property
    def popcounts(self) -> list[int]:
        return [int(m.sum()) for m in self.masks]


def cell_rng(seed: int, cell_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, cell_index])


def sample_cell(plan: SparsityPlan, cell_index: int, seed: int, dtype=np.float32,
                created_at_batch: int = 0) -> ConceptCell:
    """Exactly ``round(d_l * count_l)`` positions per layer, uniform without replacement."""
    rng = cell_rng(seed, cell_index)
    masks = []
    for shape, count, quota in zip(plan.shapes, plan.counts, plan.quotas()):
        flat = np.zeros(count, dtype=bool)
        if quota >= count:
            flat[:] = True
        elif quota > 0:
            flat[rng.choice(count, size=quota, replace=False)] = True
        masks.append(flat.reshape(shape))
    biases = [np.zeros(n, dtype=dtype) for n in plan.bias_sizes]
    return ConceptCell(cell_index, masks, biases, created_at_batch)


def freeze_cell(params: NetworkParams, cell: ConceptCell) -> None:
    """``frozen |= mask`` for every layer; flags are never cleared."""
    for frozen, mask in zip(params.frozen, cell.masks):
        if frozen.shape != mask.shape:
            raise ConfigurationError("cell masks do not match network shapes")
        frozen |= mask


def layer_saturation(params: NetworkParams, active: ConceptCell | None = None) -> list[float]:
    out = []
    for k, frozen in enumerate(params.frozen):
        used = frozen if active is None else (frozen | active.masks[k])
        out.append(float(used.sum()) / used.size)
    return out


def saturation(params: NetworkParams, active: ConceptCell | None = None) -> float:
    """Fraction of weights covered by the frozen set plus the active cell's mask."""
    used = 0
    for k, frozen in enumerate(params.frozen):
        used += int((frozen if active is None else (frozen | active.masks[k])).sum())
    return used / params.num_weights


# bitset files: u32 layer count, then per layer u32 ndim, u32 dims, u64 bit length, packed bits (LSB first)

def write_masks(masks: Sequence[np.ndarray], fh: BinaryIO) -> None:
    fh.write(struct.pack("<I", len(masks)))
    for m in masks:
        fh.write(struct.pack("<I", m.ndim))
        fh.write(struct.pack(f"<{m.ndim}I", *m.shape))
        fh.write(struct.pack("<Q", m.size))
        fh.write(np.packbits(m.reshape(-1), bitorder="little").tobytes())


def read_masks(fh: BinaryIO) -> list[np.ndarray]:
    def take(n):
        buf = fh.read(n)
        if len(buf) != n:
            raise ValueError("truncated mask bitset")
        return buf

    (n_layers,) = struct.unpack("<I", take(4))
    masks = []
    for _ in range(n_layers):
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (nbits,) = struct.unpack("<Q", take(8))
        if nbits != int(np.prod(shape)):
            raise ValueError("bitset length does not match its shape")
        raw = np.frombuffer(take((nbits + 7) // 8), dtype=np.uint8)
        masks.append(np.unpackbits(raw, count=nbits, bitorder="little").astype(bool).reshape(shape))
    return masks


def masks_to_bytes(masks: Sequence[np.ndarray]) -> bytes:
    buf = io.BytesIO()
    write_masks(masks, buf)
    return buf.getvalue()


def masks_from_bytes(data: bytes) -> list[np.ndarray]:
    return read_masks(io.BytesIO(data))
