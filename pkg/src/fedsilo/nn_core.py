"""Feed-forward MLP with softmax cross-entropy, operating on flat parameter vectors.

Parameters live in a single float64 vector. ``layer_spans`` records where each
weight matrix and bias vector sits so callers can slice per layer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class Span:
    offset: int
    length: int
    label: str

    @property
    def stop(self) -> int:
        return self.offset + self.length


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    layer_spans: tuple[Span, ...]

    def __post_init__(self):
        pos = 0
        for span in self.layer_spans:
            if span.offset != pos or span.length < 0:
                raise ConfigError(f"layer span {span} is not contiguous")
            pos = span.stop
        if pos != self.values.shape[0] or self.values.ndim != 1:
            raise ConfigError(
                f"layer spans cover {pos} entries but vector has shape {self.values.shape}"
            )

    def __len__(self) -> int:
        return self.values.shape[0]

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float64), self.layer_spans)

    def layer(self, index: int) -> np.ndarray:
        span = self.layer_spans[index]
        return self.values[span.offset : span.stop]

    def subset(self, indices: Sequence[int]) -> "ParamVector":
        """New vector holding only the listed spans, re-based to be contiguous."""
        spans = []
        chunks = []
        pos = 0
        for i in indices:
            span = self.layer_spans[i]
            spans.append(Span(pos, span.length, span.label))
            chunks.append(self.layer(i))
            pos += span.length
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return ParamVector(values, tuple(spans))

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layer_spans == other.layer_spans

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


@dataclass(frozen=True)
class MlpArch:
    layer_widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ConfigError("an MLP needs at least input and output widths")
        if any(w < 1 for w in widths):
            raise ConfigError(f"layer widths must be positive, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")

    @property
    def n_inputs(self) -> int:
        return self.layer_widths[0]

    @property
    def n_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def spans(self) -> tuple[Span, ...]:
        spans = []
        pos = 0
        for k, (fan_in, fan_out) in enumerate(zip(self.layer_widths, self.layer_widths[1:])):
            spans.append(Span(pos, fan_in * fan_out, f"W{k + 1}"))
            pos += fan_in * fan_out
            spans.append(Span(pos, fan_out, f"b{k + 1}"))
            pos += fan_out
        return tuple(spans)

    @property
    def n_params(self) -> int:
        return sum(s.length for s in self.spans())

    def classifier_spans(self) -> tuple[int, int]:
        """Span indices of the final weight matrix and bias."""
        n = 2 * self.n_layers
        return (n - 2, n - 1)


@dataclass(frozen=True, eq=False)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ConfigError("features must be 2-D and labels 1-D")
        if self.features.shape[0] != self.labels.shape[0] or self.labels.shape[0] < 1:
            raise ConfigError("batch needs at least one sample and matching label count")

    def __len__(self) -> int:
        return self.labels.shape[0]


def init_params(arch: MlpArch, seed) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    spans = arch.spans()
    values = np.zeros(arch.n_params)
    for k, (fan_in, fan_out) in enumerate(zip(arch.layer_widths, arch.layer_widths[1:])):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = spans[2 * k]
        values[w.offset : w.stop] = rng.uniform(-limit, limit, size=w.length)
    return ParamVector(values, spans)


def _unpack(params: ParamVector, arch: MlpArch):
    if len(params) != arch.n_params or params.layer_spans != arch.spans():
        raise ConfigError(
            f"parameter vector of length {len(params)} does not match arch {arch.layer_widths}"
        )
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(arch.layer_widths, arch.layer_widths[1:])):
        w = params.layer(2 * k).reshape(fan_in, fan_out)
        b = params.layer(2 * k + 1)
        layers.append((w, b))
    return layers


def _check_batch(arch: MlpArch, batch: Batch):
    if batch.features.shape[1] != arch.n_inputs:
        raise ConfigError(
            f"batch has {batch.features.shape[1]} features, arch expects {arch.n_inputs}"
        )
    labels = batch.labels
    if labels.min() < 0 or labels.max() >= arch.n_classes:
        raise ConfigError(f"labels must lie in [0, {arch.n_classes})")


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z, a, kind):
    return (z > 0.0).astype(z.dtype) if kind == "relu" else 1.0 - a * a


def logits(params: ParamVector, arch: MlpArch, features: np.ndarray) -> np.ndarray:
    h = np.asarray(features, dtype=np.float64)
    layers = _unpack(params, arch)
    for k, (w, b) in enumerate(layers):
        h = h @ w + b
        if k < len(layers) - 1:
            h = _act(h, arch.activation)
    return h


def predict(params: ParamVector, arch: MlpArch, features: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(logits(params, arch, features), axis=1)


def _log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward_loss(params: ParamVector, arch: MlpArch, batch: Batch) -> float:
    """Mean cross-entropy of the batch."""
    _check_batch(arch, batch)
    logp = _log_softmax(logits(params, arch, batch.features))
    return float(-logp[np.arange(len(batch)), batch.labels].mean())


def backward(params: ParamVector, arch: MlpArch, batch: Batch) -> ParamVector:
    """Gradient of the mean batch cross-entropy w.r.t. the flat parameters."""
    _check_batch(arch, batch)
    layers = _unpack(params, arch)
    n = len(batch)
    pre, post = [], [np.asarray(batch.features, dtype=np.float64)]
    h = post[0]
    for k, (w, b) in enumerate(layers):
        z = h @ w + b
        pre.append(z)
        h = _act(z, arch.activation) if k < len(layers) - 1 else z
        post.append(h)

    delta = np.exp(_log_softmax(post[-1]))
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n

    grads = [None] * len(layers)
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        grads[k] = (post[k].T @ delta, delta.sum(axis=0))
        if k > 0:
            delta = (delta @ w.T) * _act_grad(pre[k - 1], post[k], arch.activation)

    flat = np.concatenate([part.ravel() for gw, gb in grads for part in (gw, gb)])
    return params.with_values(flat)


class BatchSampler:
    """Draws mini-batches without replacement from a per-pass shuffle.

    A fresh permutation is drawn whenever the current one is used up; the
    final batch of a pass may be shorter than ``batch_size``.
    """

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ConfigError("cannot sample batches from an empty dataset")
        if batch_size < 1:
            raise ConfigError("batch_size must be positive")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos >= self._order.shape[0]:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def steps_for_epochs(local_epochs: float, n_samples: int, batch_size: int) -> int:
    return max(1, math.ceil(local_epochs * n_samples / batch_size))


def local_train(
    params: ParamVector,
    arch: MlpArch,
    dataset: tuple[np.ndarray, np.ndarray],
    steps: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
) -> tuple[ParamVector, ParamVector]:
    """Run ``steps`` SGD steps and return (updated params, accumulated update).

    The accumulated update is the sum of per-step mean-batch gradients and the
    returned params are exactly ``params - lr * update``.
    """
    x, y = dataset
    if steps < 1:
        raise ConfigError("local_train needs at least one step")
    if len(y) == 0:
        raise ConfigError("local_train got an empty dataset")
    sampler = BatchSampler(len(y), batch_size, rng)
    w = params
    acc = np.zeros(len(params))
    for _ in range(steps):
        idx = sampler.next()
        g = backward(w, arch, Batch(x[idx], y[idx])).values
        acc += g
        w = params.with_values(w.values - lr * g)
    update = params.with_values(acc)
    return params.with_values(params.values - lr * acc), update


def full_gradient(params: ParamVector, arch: MlpArch, dataset) -> ParamVector:
    x, y = dataset
    return backward(params, arch, Batch(x, y))


def dataset_loss(params: ParamVector, arch: MlpArch, dataset) -> float:
    x, y = dataset
    return forward_loss(params, arch, Batch(x, y))
