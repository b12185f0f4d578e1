"""Task-conditioned connectivity between adjacent layers.

Each unit ("filter") of a layer is standardized within every class of the
probe batch, the class-conditional correlation of a lower/upper unit pair is
the mean product of their standardized outputs, and the class terms are
combined with prior weights.  A layer's connectivity is the mean absolute
correlation over all unit pairs it forms with the next layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .errors import ConfigError, InputError, InsufficientDataError
from .nn import Network, forward

# Relative std below which a unit is treated as constant within a group.
DEGENERATE_RTOL = 1e-12


@dataclass
class ActivationSample:
    layer_index: int
    values: np.ndarray
    labels: np.ndarray
    per_class: bool = True
    degenerate: np.ndarray | None = None  # (num_groups, num_filters), set by standardize
    groups: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.values.ndim != 2:
            raise InputError("activation values must be (num_examples, num_filters)")
        if self.values.shape[0] != self.labels.shape[0]:
            raise InputError(
                f"{self.values.shape[0]} activation rows but {self.labels.shape[0]} labels"
            )

    @property
    def num_filters(self) -> int:
        return self.values.shape[1]


def _group_ids(labels: np.ndarray, per_class: bool) -> np.ndarray:
    return np.unique(labels) if per_class else np.array([0])


def _group_rows(labels: np.ndarray, group, per_class: bool) -> np.ndarray:
    return labels == group if per_class else np.ones(labels.shape, dtype=bool)


def standardize(acts: ActivationSample, per_class: bool = True) -> ActivationSample:
    """Zero-mean, unit (population) variance per filter, within each class.

    Filters that are constant inside a group come out as zeros in that group
    and are flagged in ``degenerate``.
    """
    groups = _group_ids(acts.labels, per_class)
    out = np.empty_like(acts.values)
    degenerate = np.zeros((len(groups), acts.num_filters), dtype=bool)
    for g_idx, g in enumerate(groups):
        rows = _group_rows(acts.labels, g, per_class)
        block = acts.values[rows]
        if block.shape[0] < 2:
            raise InsufficientDataError(
                f"group {g} has {block.shape[0]} example(s); need at least 2"
            )
        mean = block.mean(axis=0)
        centered = block - mean
        std = np.sqrt(np.mean(centered * centered, axis=0))
        dead = std <= DEGENERATE_RTOL * (1.0 + np.abs(mean))
        safe = np.where(dead, 1.0, std)
        z = centered / safe
        z[:, dead] = 0.0
        out[rows] = z
        degenerate[g_idx] = dead
    return replace(acts, values=out, per_class=per_class, degenerate=degenerate, groups=groups)


def empirical_priors(labels: np.ndarray) -> dict[int, float]:
    classes, counts = np.unique(labels, return_counts=True)
    total = counts.sum()
    return {int(c): float(n) / float(total) for c, n in zip(classes, counts)}


def _resolve_priors(labels: np.ndarray, priors: Mapping[int, float] | None, per_class: bool):
    if not per_class:
        return np.array([0]), np.array([1.0])
    if priors is None:
        priors = empirical_priors(labels)
    classes = np.unique(labels)
    missing = [int(c) for c in classes if int(c) not in priors]
    if missing:
        raise InputError(f"no prior given for classes {missing}")
    weights = np.array([priors[int(c)] for c in classes], dtype=np.float64)
    if abs(sum(priors.values()) - 1.0) > 1e-9:
        raise InputError(f"priors sum to {sum(priors.values())}, expected 1")
    return classes, weights


def pearson_abs(a, b, labels, priors: Mapping[int, float] | None = None, per_class: bool = True) -> float:
    """``|sum_y prior(y) * mean_{class y}(a * b)|`` for standardized columns."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    labels = np.asarray(labels)
    if not (a.shape == b.shape == labels.shape):
        raise InputError(f"length mismatch: {a.shape}, {b.shape}, {labels.shape}")
    classes, weights = _resolve_priors(labels, priors, per_class)
    total = 0.0
    for c, w in zip(classes, weights):
        rows = _group_rows(labels, c, per_class)
        total += w * float(np.mean(a[rows] * b[rows]))
    return min(abs(total), 1.0)


def layer_delta(
    lower: ActivationSample,
    upper: ActivationSample,
    priors: Mapping[int, float] | None = None,
    per_class: bool = True,
) -> tuple[float, np.ndarray]:
    """Connectivity between two layers and the full ``|rho|`` pair matrix.

    Raw activations are standardized here; standardizing twice is harmless.
    """
    if lower.values.shape[0] != upper.values.shape[0] or not np.array_equal(
        lower.labels, upper.labels
    ):
        raise InputError("lower and upper samples must share the same examples")
    lo = standardize(lower, per_class).values
    up = standardize(upper, per_class).values
    labels = lower.labels
    classes, weights = _resolve_priors(labels, priors, per_class)
    corr = np.zeros((lo.shape[1], up.shape[1]))
    for c, w in zip(classes, weights):
        rows = _group_rows(labels, c, per_class)
        corr += w * (lo[rows].T @ up[rows]) / rows.sum()
    pair = np.clip(np.abs(corr), 0.0, 1.0)
    delta = float(pair.sum() / pair.size)
    return delta, pair


@dataclass
class ConnectivityReport:
    task_id: int
    deltas: list[float]
    pair_matrices: list[np.ndarray] = field(default_factory=list, repr=False)
    eta: float | None = None

    @property
    def layers(self) -> list[int]:
        return list(range(len(self.deltas)))

    def sensitive_layers(self) -> list[int]:
        if self.eta is None:
            return []
        return [l for l, d in enumerate(self.deltas) if is_sensitive(d, self.eta)]

    def rows(self) -> list[tuple]:
        return [(self.task_id, l, d) for l, d in enumerate(self.deltas)]

    def long_rows(self) -> list[tuple]:
        out = []
        for l, m in enumerate(self.pair_matrices):
            for i in range(m.shape[0]):
                for j in range(m.shape[1]):
                    out.append((self.task_id, l, i, j, float(m[i, j])))
        return out


def activation_samples(net: Network, x: np.ndarray, labels: np.ndarray) -> list[ActivationSample]:
    _, trace = forward(net, x)
    return [ActivationSample(i, a, labels) for i, a in enumerate(trace.acts)]


def compute_report(
    net: Network,
    x: np.ndarray,
    labels: np.ndarray,
    task_id: int = 0,
    per_class: bool = True,
    priors: Mapping[int, float] | None = None,
    eta: float | None = None,
) -> ConnectivityReport:
    """Connectivity of every adjacent layer pair on a probe batch.

    Entry ``l`` of the report belongs to the pair (layer ``l``, layer ``l+1``),
    so a network with L weight layers yields L-1 values.
    """
    samples = activation_samples(net, x, labels)
    deltas, mats = [], []
    for lower, upper in zip(samples, samples[1:]):
        d, m = layer_delta(lower, upper, priors, per_class)
        deltas.append(d)
        mats.append(m)
    return ConnectivityReport(task_id, deltas, mats, eta)


def rank_layers(report: ConnectivityReport) -> list[int]:
    """Layer indices by descending connectivity; ties keep the lower index first."""
    return sorted(report.layers, key=lambda l: -report.deltas[l])


def is_sensitive(delta: float, eta: float) -> bool:
    if not 0.0 <= eta <= 1.0:
        raise ConfigError(f"eta must lie in [0, 1], got {eta}")
    return delta >= eta
