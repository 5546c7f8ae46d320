"""Minimal numpy network substrate: masked forward, exact backprop, masked/frozen SGD.

Weights live in a single shared store (:class:`NetworkParams`).  Every forward and
backward pass is taken through a *cell*: an object exposing per-layer boolean
``masks`` and per-layer ``biases``.  Effective weights are ``weight * mask``.

Layouts
-------
Dense weight: ``(in_features, out_features)``; forward is ``x @ W + b``.
Conv weight:  ``(out_channels, in_channels, kernel_h, kernel_w)``; NCHW activations.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ConfigurationError(ValueError):
    """Raised for inconsistent architectures or invalid hyperparameters."""


class InputError(ValueError):
    """Raised for malformed inputs (shapes, labels, accuracies)."""


PRECISIONS = {"fast": np.float32, "verify": np.float64}


# ---------------------------------------------------------------------------
# layer specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class MaxPool:
    size: int
    stride: int


LayerSpec = Union[Dense, Conv, ReLU, Flatten, MaxPool]
PARAMETRIC = (Dense, Conv)
_KINDS = {cls.__name__: cls for cls in (Dense, Conv, ReLU, Flatten, MaxPool)}


def layer_to_dict(layer: LayerSpec) -> dict:
    d = {"kind": type(layer).__name__}
    d.update(layer.__dict__)
    return d


def layer_from_dict(d: dict) -> LayerSpec:
    d = dict(d)
    kind = d.pop("kind")
    if kind not in _KINDS:
        raise ConfigurationError(f"unknown layer kind {kind!r}")
    return _KINDS[kind](**d)


def weight_shape(layer: LayerSpec) -> tuple:
    if isinstance(layer, Dense):
        return (layer.in_features, layer.out_features)
    if isinstance(layer, Conv):
        return (layer.out_channels, layer.in_channels, layer.kernel_h, layer.kernel_w)
    raise ConfigurationError(f"{layer!r} has no weights")


def fan_in(layer: LayerSpec) -> int:
    if isinstance(layer, Dense):
        return layer.in_features
    return layer.in_channels * layer.kernel_h * layer.kernel_w


def out_features(layer: LayerSpec) -> int:
    return layer.out_features if isinstance(layer, Dense) else layer.out_channels


def infer_shapes(architecture: Sequence[LayerSpec], input_shape: tuple | None = None) -> list[tuple]:
    """Propagate per-sample shapes through ``architecture``.

    Returns the output shape of every layer.  ``input_shape`` may be omitted for
    purely dense stacks; it is then taken from the first layer.
    """
    if not architecture:
        raise ConfigurationError("empty architecture")
    if input_shape is None:
        first = architecture[0]
        if not isinstance(first, Dense):
            raise ConfigurationError("input_shape is required unless the first layer is Dense")
        input_shape = (first.in_features,)
    shape = tuple(int(s) for s in input_shape)
    shapes = []
    for idx, layer in enumerate(architecture):
        if isinstance(layer, Dense):
            if len(shape) != 1 or shape[0] != layer.in_features:
                raise ConfigurationError(
                    f"layer {idx}: Dense expects ({layer.in_features},) input, got {shape}")
            if layer.in_features <= 0 or layer.out_features <= 0:
                raise ConfigurationError(f"layer {idx}: zero-size Dense layer")
            shape = (layer.out_features,)
        elif isinstance(layer, Conv):
            if len(shape) != 3 or shape[0] != layer.in_channels:
                raise ConfigurationError(
                    f"layer {idx}: Conv expects {layer.in_channels} input channels, got {shape}")
            if min(layer.in_channels, layer.out_channels, layer.kernel_h, layer.kernel_w, layer.stride) <= 0:
                raise ConfigurationError(f"layer {idx}: zero-size Conv layer")
            _, h, w = shape
            oh = (h + 2 * layer.padding - layer.kernel_h) // layer.stride + 1
            ow = (w + 2 * layer.padding - layer.kernel_w) // layer.stride + 1
            if oh <= 0 or ow <= 0:
                raise ConfigurationError(f"layer {idx}: kernel larger than input {shape}")
            shape = (layer.out_channels, oh, ow)
        elif isinstance(layer, MaxPool):
            if len(shape) != 3:
                raise ConfigurationError(f"layer {idx}: MaxPool needs a C x H x W input, got {shape}")
            c, h, w = shape
            oh = (h - layer.size) // layer.stride + 1
            ow = (w - layer.size) // layer.stride + 1
            if oh <= 0 or ow <= 0:
                raise ConfigurationError(f"layer {idx}: pool window larger than input {shape}")
            shape = (c, oh, ow)
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, ReLU):
            pass
        else:
            raise ConfigurationError(f"layer {idx}: unsupported layer {layer!r}")
        shapes.append(shape)
    return shapes


def mlp_400(in_features: int = 784, num_classes: int = 10, hidden: int = 400) -> list[LayerSpec]:
    """Two hidden layers of 400 ReLU units before the classifier."""
    return [Dense(in_features, hidden), ReLU(), Dense(hidden, hidden), ReLU(), Dense(hidden, num_classes)]


def cnn_small(in_channels: int = 3, num_classes: int = 10, image_size: int = 32) -> list[LayerSpec]:
    """Two conv + pool stages followed by two dense layers."""
    s = image_size - 2            # conv 3x3, no padding
    s = (s - 2) // 2 + 1          # pool 2/2
    s = s - 2
    s = (s - 2) // 2 + 1
    return [
        Conv(in_channels, 16, 3, 3), ReLU(), MaxPool(2, 2),
        Conv(16, 32, 3, 3), ReLU(), MaxPool(2, 2),
        Flatten(), Dense(32 * s * s, 128), ReLU(), Dense(128, num_classes),
    ]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    weight_decay: float = 5e-4
    batch_size: int = 10
    precision_mode: str = "fast"

    def __post_init__(self):
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ConfigurationError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.precision_mode not in PRECISIONS:
            raise ConfigurationError(f"precision_mode must be one of {sorted(PRECISIONS)}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision_mode]


@dataclass
class NetworkParams:
    architecture: list
    input_shape: tuple
    weights: list[np.ndarray]
    frozen: list[np.ndarray]
    init_seed: int
    layer_index: list[int] = field(default_factory=list)   # architecture position of each parametric layer

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def parametric_layers(self) -> list[LayerSpec]:
        return [self.architecture[i] for i in self.layer_index]

    @property
    def num_weights(self) -> int:
        return int(sum(w.size for w in self.weights))

    def bias_sizes(self) -> list[int]:
        return [out_features(layer) for layer in self.parametric_layers]

    def copy(self) -> "NetworkParams":
        return NetworkParams(list(self.architecture), self.input_shape,
                             [w.copy() for w in self.weights], [f.copy() for f in self.frozen],
                             self.init_seed, list(self.layer_index))


def init_network(architecture: Sequence[LayerSpec], seed: int, input_shape: tuple | None = None,
                 precision: str = "fast") -> NetworkParams:
    """Fan-in scaled uniform init, ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``; nothing frozen."""
    infer_shapes(architecture, input_shape)
    if input_shape is None:
        input_shape = (architecture[0].in_features,)
    dtype = PRECISIONS[precision]
    rng = np.random.default_rng(seed)
    weights, frozen, index = [], [], []
    for i, layer in enumerate(architecture):
        if not isinstance(layer, PARAMETRIC):
            continue
        bound = np.sqrt(6.0 / fan_in(layer))
        w = rng.uniform(-bound, bound, size=weight_shape(layer)).astype(dtype)
        weights.append(w)
        frozen.append(np.zeros(w.shape, dtype=bool))
        index.append(i)
    if not weights:
        raise ConfigurationError("architecture has no parametric layers")
    return NetworkParams(list(architecture), tuple(input_shape), weights, frozen, seed, index)


@dataclass
class DenseCell:
    """All-ones masks plus biases: turns the shared store into an ordinary dense net."""
    masks: list[np.ndarray]
    biases: list[np.ndarray]


def dense_cell(params: NetworkParams) -> DenseCell:
    return DenseCell([np.ones(w.shape, dtype=bool) for w in params.weights],
                     [np.zeros(n, dtype=params.dtype) for n in params.bias_sizes()])


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    entries: list[Any]
    cell_id: int
    batch_size: int


def _im2col(x: np.ndarray, layer: Conv) -> tuple[np.ndarray, tuple]:
    p = layer.padding
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (layer.kernel_h, layer.kernel_w), axis=(2, 3))
    win = win[:, :, ::layer.stride, ::layer.stride]           # B, C, OH, OW, kh, kw
    b, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * layer.kernel_h * layer.kernel_w)
    return cols, (b, oh, ow, x.shape)


def _col2im(dcols: np.ndarray, layer: Conv, meta: tuple) -> np.ndarray:
    b, oh, ow, padded_shape = meta
    kh, kw, s, p = layer.kernel_h, layer.kernel_w, layer.stride, layer.padding
    c = padded_shape[1]
    d = dcols.reshape(b, oh, ow, c, kh, kw)
    dx = np.zeros(padded_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if p:
        dx = dx[:, :, p:-p, p:-p]
    return dx


def _effective(params: NetworkParams, cell, k: int) -> np.ndarray:
    return params.weights[k] * cell.masks[k]


def _check_cell(params: NetworkParams, cell) -> None:
    if len(cell.masks) != len(params.weights) or len(cell.biases) != len(params.weights):
        raise InputError("cell layer count does not match network")
    for k, (w, m, b) in enumerate(zip(params.weights, cell.masks, cell.biases)):
        if m.shape != w.shape:
            raise InputError(f"mask {k} shape {m.shape} != weight shape {w.shape}")
        if b.shape != (w.shape[1] if w.ndim == 2 else w.shape[0],):
            raise InputError(f"bias {k} has wrong shape {b.shape}")


def forward(params: NetworkParams, cell, batch: np.ndarray, keep_cache: bool = True):
    """Masked forward pass.  Returns ``(logits, cache)``; ``cache`` is None if not kept."""
    x = np.asarray(batch, dtype=params.dtype)
    if x.shape[1:] != tuple(params.input_shape):
        raise InputError(f"batch shape {x.shape[1:]} does not match network input {params.input_shape}")
    _check_cell(params, cell)
    entries = []
    k = 0
    for layer in params.architecture:
        if isinstance(layer, Dense):
            w = _effective(params, cell, k)
            entries.append((x, w) if keep_cache else None)
            x = x @ w + cell.biases[k]
            k += 1
        elif isinstance(layer, Conv):
            w = _effective(params, cell, k)
            cols, meta = _im2col(x, layer)
            wmat = w.reshape(w.shape[0], -1)
            out = cols @ wmat.T + cell.biases[k]
            b, oh, ow, _ = meta
            entries.append((cols, meta, wmat) if keep_cache else None)
            x = out.reshape(b, oh, ow, -1).transpose(0, 3, 1, 2)
            k += 1
        elif isinstance(layer, ReLU):
            pos = x > 0
            entries.append(pos if keep_cache else None)
            x = x * pos
        elif isinstance(layer, MaxPool):
            win = sliding_window_view(x, (layer.size, layer.size), axis=(2, 3))
            win = win[:, :, ::layer.stride, ::layer.stride]
            flat = win.reshape(win.shape[:4] + (-1,))
            idx = flat.argmax(axis=-1)
            entries.append((idx, x.shape) if keep_cache else None)
            x = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        elif isinstance(layer, Flatten):
            entries.append(x.shape if keep_cache else None)
            x = x.reshape(x.shape[0], -1)
    cache = ForwardCache(entries, id(cell), x.shape[0]) if keep_cache else None
    return x, cache


def cross_entropy(logits: np.ndarray, labels: np.ndarray, num_classes: int | None = None):
    """Mean softmax cross-entropy and its exact gradient ``(softmax - onehot) / B``."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if num_classes is None:
        num_classes = c
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= min(c, num_classes)):
        raise InputError(f"label out of range [0, {min(c, num_classes)})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


def backward(params: NetworkParams, cell, cache: ForwardCache, grad_logits: np.ndarray) -> Gradients:
    """Exact gradients of the masked forward; masked-out positions get exactly zero."""
    if cache is None or len(cache.entries) != len(params.architecture):
        raise RuntimeError("forward cache does not match the architecture")
    if cache.cell_id != id(cell) or grad_logits.shape[0] != cache.batch_size:
        raise RuntimeError("stale forward cache: produced for a different cell or batch")
    g = np.asarray(grad_logits, dtype=params.dtype)
    k = len(params.weights)
    gw: list = [None] * k
    gb: list = [None] * k
    for layer, entry in zip(reversed(params.architecture), reversed(cache.entries)):
        if isinstance(layer, Dense):
            k -= 1
            x, w = entry
            gw[k] = (x.T @ g) * cell.masks[k]
            gb[k] = g.sum(axis=0)
            g = g @ w.T
        elif isinstance(layer, Conv):
            k -= 1
            cols, meta, wmat = entry
            gout = g.transpose(0, 2, 3, 1).reshape(-1, wmat.shape[0])
            gw[k] = (gout.T @ cols).reshape(params.weights[k].shape) * cell.masks[k]
            gb[k] = gout.sum(axis=0)
            g = _col2im(gout @ wmat, layer, meta)
        elif isinstance(layer, ReLU):
            g = g * entry
        elif isinstance(layer, MaxPool):
            idx, in_shape = entry
            dx = np.zeros(in_shape, dtype=g.dtype)
            oh, ow = idx.shape[2:]
            s, p = layer.stride, layer.size
            for off in range(p * p):
                di, dj = divmod(off, p)
                dx[:, :, di:di + s * oh:s, dj:dj + s * ow:s] += g * (idx == off)
            g = dx
        elif isinstance(layer, Flatten):
            g = g.reshape(entry)
    return Gradients(gw, gb)


def sgd_step(params: NetworkParams, cell, grads: Gradients, config: TrainConfig) -> None:
    """In-place SGD with L2 weight decay: ``w <- w - lr * (g + wd * w)``.

    Only positions with ``mask & ~frozen`` move.  Biases of ``cell`` always move.
    """
    lr, wd = config.learning_rate, config.weight_decay
    if lr == 0:
        return
    for k, w in enumerate(params.weights):
        if grads.weights[k].shape != w.shape:
            raise InputError(f"gradient {k} shape mismatch")
        trainable = cell.masks[k] & ~params.frozen[k]
        update = grads.weights[k] + wd * w
        update *= lr
        update *= trainable
        w -= update
        b = cell.biases[k]
        b -= lr * (grads.biases[k] + wd * b)


def train_step(params: NetworkParams, cell, x: np.ndarray, y: np.ndarray, config: TrainConfig,
               num_classes: int | None = None) -> tuple[float, float]:
    """Forward, CE, backward, SGD.  Returns (loss, pre-update batch accuracy)."""
    logits, cache = forward(params, cell, x)
    loss, g = cross_entropy(logits, y, num_classes)
    acc = float(np.mean(logits.argmax(axis=1) == y)) if len(y) else 0.0
    grads = backward(params, cell, cache, g)
    sgd_step(params, cell, grads, config)
    return loss, acc


def predict_logits(params: NetworkParams, cell, x: np.ndarray, chunk: int = 1000) -> np.ndarray:
    """Cache-free forward over ``x`` in chunks."""
    out = [forward(params, cell, x[i:i + chunk], keep_cache=False)[0] for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros((0, 0), dtype=params.dtype)
