"""Minimal dense feed-forward network with masked SGD.

Weights are stored as ``(out_dim, in_dim)`` float64 arrays, inputs as
``(batch, in_dim)`` rows, so a layer computes ``z = a @ W.T``.  Biases are
off by default and, when enabled, never take part in masking.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, InputError, StateError

ACTIVATIONS = ("relu", "tanh", "identity", "softmax_output")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"layer dims must be positive, got {self.in_dim}x{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass
class Network:
    layers: list[LayerSpec]
    weights: list[np.ndarray]
    biases: list[np.ndarray] | None = None

    def __post_init__(self):
        if len(self.layers) == 0:
            raise ConfigError("network needs at least one layer")
        if len(self.weights) != len(self.layers):
            raise DimensionError("one weight matrix per layer required")
        for i, (spec, w) in enumerate(zip(self.layers, self.weights)):
            if w.shape != (spec.out_dim, spec.in_dim):
                raise DimensionError(
                    f"layer {i}: weight shape {w.shape} != {(spec.out_dim, spec.in_dim)}"
                )
            if spec.activation == "softmax_output" and i != len(self.layers) - 1:
                raise ConfigError("softmax_output is only allowed on the final layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        if self.biases is not None:
            if len(self.biases) != len(self.layers):
                raise DimensionError("one bias vector per layer required")
            for spec, b in zip(self.layers, self.biases):
                if b.shape != (spec.out_dim,):
                    raise DimensionError(f"bias shape {b.shape} != {(spec.out_dim,)}")

    @property
    def bias_enabled(self) -> bool:
        return self.biases is not None

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].in_dim] + [s.out_dim for s in self.layers]

    @property
    def num_params(self) -> int:
        n = sum(w.size for w in self.weights)
        if self.biases is not None:
            n += sum(b.size for b in self.biases)
        return n

    def copy(self) -> "Network":
        return Network(
            list(self.layers),
            [w.copy() for w in self.weights],
            None if self.biases is None else [b.copy() for b in self.biases],
        )

    def to_vector(self) -> np.ndarray:
        """Flatten weights (then biases, if any) into one parameter vector."""
        parts = [w.ravel() for w in self.weights]
        if self.biases is not None:
            parts += [b.ravel() for b in self.biases]
        return np.concatenate(parts)

    def with_vector(self, vec: np.ndarray) -> "Network":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.num_params,):
            raise DimensionError(f"parameter vector has shape {vec.shape}, expected ({self.num_params},)")
        weights, pos = [], 0
        for w in self.weights:
            weights.append(vec[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
        biases = None
        if self.biases is not None:
            biases = []
            for b in self.biases:
                biases.append(vec[pos:pos + b.size].copy())
                pos += b.size
        return Network(list(self.layers), weights, biases)


@dataclass
class ForwardTrace:
    """Everything ``backward`` needs, plus per-layer post-activations."""

    inputs: np.ndarray
    preacts: list[np.ndarray]
    acts: list[np.ndarray]
    logits: np.ndarray

    def __len__(self) -> int:
        return len(self.acts)


@dataclass
class GradientSet:
    weights: list[np.ndarray]
    biases: list[np.ndarray] | None = None

    def to_vector(self) -> np.ndarray:
        parts = [g.ravel() for g in self.weights]
        if self.biases is not None:
            parts += [g.ravel() for g in self.biases]
        return np.concatenate(parts)


def glorot_uniform(fan_out: int, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_network(
    dims: Sequence[int],
    hidden_activation: str = "relu",
    output_activation: str = "softmax_output",
    seed: int = 0,
    bias: bool = False,
) -> Network:
    """Build a chain of dense layers ``dims[0] -> dims[1] -> ... -> dims[-1]``."""
    if len(dims) < 2:
        raise ConfigError("need at least input and output dims")
    rng = np.random.default_rng(seed)
    n = len(dims) - 1
    layers = [
        LayerSpec(dims[i], dims[i + 1], output_activation if i == n - 1 else hidden_activation)
        for i in range(n)
    ]
    weights = [glorot_uniform(s.out_dim, s.in_dim, rng) for s in layers]
    biases = [np.zeros(s.out_dim) for s in layers] if bias else None
    return Network(layers, weights, biases)


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "identity":
        return z
    return softmax(z)


def _activation_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward(net: Network, batch: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    """Run ``batch`` through ``net``.

    Returns raw logits and a trace holding every layer's pre- and
    post-activation.  For a ``softmax_output`` final layer the logits are the
    pre-softmax values and the trace stores the probabilities.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.layers[0].in_dim:
        raise DimensionError(
            f"batch has shape {x.shape}, expected (batch, {net.layers[0].in_dim})"
        )
    preacts, acts = [], []
    a = x
    for i, (spec, w) in enumerate(zip(net.layers, net.weights)):
        z = a @ w.T
        if net.biases is not None:
            z = z + net.biases[i]
        a = _activate(spec.activation, z)
        preacts.append(z)
        acts.append(a)
    last = net.layers[-1].activation
    logits = preacts[-1] if last == "softmax_output" else acts[-1]
    return logits, ForwardTrace(x, preacts, acts, logits)


def _check_labels(labels, num_rows: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (num_rows,):
        raise InputError(f"labels shape {y.shape} does not match batch of {num_rows}")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise InputError(f"label out of range [0, {num_classes})")
    return y.astype(np.int64)


def per_sample_ce(logits: np.ndarray, labels) -> np.ndarray:
    """Cross-entropy of each row, ``-log softmax(logits)[label]``."""
    y = _check_labels(labels, logits.shape[0], logits.shape[1])
    return -log_softmax(logits)[np.arange(len(y)), y]


def loss_ce(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its exact gradient with respect to the logits."""
    y = _check_labels(labels, logits.shape[0], logits.shape[1])
    n = logits.shape[0]
    loss = float(np.mean(-log_softmax(logits)[np.arange(n), y]))
    grad = softmax(logits)
    grad[np.arange(n), y] -= 1.0
    grad /= n
    return loss, grad


def backward(net: Network, trace: ForwardTrace, logit_grad: np.ndarray) -> GradientSet:
    """Reverse-mode gradients of a scalar loss whose logit gradient is given."""
    if len(trace) != net.num_layers or any(
        a.shape[1] != s.out_dim for a, s in zip(trace.acts, net.layers)
    ):
        raise StateError("trace was not produced by this network")
    if logit_grad.shape != trace.logits.shape:
        raise DimensionError(f"logit_grad shape {logit_grad.shape} != logits {trace.logits.shape}")
    L = net.num_layers
    grads_w: list[np.ndarray] = [None] * L  # type: ignore[list-item]
    grads_b: list[np.ndarray] | None = [None] * L if net.biases is not None else None  # type: ignore[list-item]
    spec = net.layers[-1]
    if spec.activation == "softmax_output":
        delta = logit_grad
    else:
        delta = logit_grad * _activation_grad(spec.activation, trace.preacts[-1], trace.acts[-1])
    for i in range(L - 1, -1, -1):
        a_prev = trace.inputs if i == 0 else trace.acts[i - 1]
        grads_w[i] = delta.T @ a_prev
        if grads_b is not None:
            grads_b[i] = delta.sum(axis=0)
        if i > 0:
            below = net.layers[i - 1]
            delta = (delta @ net.weights[i]) * _activation_grad(
                below.activation, trace.preacts[i - 1], trace.acts[i - 1]
            )
    return GradientSet(grads_w, grads_b)


def sgd_step(net: Network, grads: GradientSet, lr: float, trainable=None) -> Network:
    """In-place ``w -= lr * g`` restricted to trainable coordinates.

    ``trainable`` is a list of boolean arrays shaped like the weights, an
    object with a ``trainable()`` method returning one (a ``MaskSet``), or
    ``None`` for everything.  Untouched coordinates keep their exact bits.
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if trainable is not None and hasattr(trainable, "trainable"):
        trainable = trainable.trainable()
    if trainable is not None and len(trainable) != net.num_layers:
        raise DimensionError("mask count does not match layer count")
    for i, (w, g) in enumerate(zip(net.weights, grads.weights)):
        if g.shape != w.shape:
            raise DimensionError(f"gradient shape {g.shape} != weight shape {w.shape}")
        if trainable is None:
            w -= lr * g
        else:
            m = trainable[i]
            if m.shape != w.shape:
                raise DimensionError(f"mask shape {m.shape} != weight shape {w.shape}")
            np.subtract(w, lr * g, out=w, where=m)
    if net.biases is not None and grads.biases is not None:
        for b, g in zip(net.biases, grads.biases):
            b -= lr * g
    return net


def predict(net: Network, x: np.ndarray) -> np.ndarray:
    logits, _ = forward(net, x)
    return np.argmax(logits, axis=1)
