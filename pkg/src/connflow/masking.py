"""Per-task freeze masks, magnitude pruning and the connectivity-guided
per-layer pruning policy.

A weight is in exactly one of three states at any time:

* frozen: ``frozen_owner > 0``, permanently owned by the task that froze it;
* pruned: ``pruned_now`` is set, zeroed during the current task and not
  trainable until the task's masks are committed;
* free: everything else, trainable by the current task.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .connectivity import ConnectivityReport
from .errors import ConfigError, DimensionError, StateError

log = logging.getLogger(__name__)

POLICIES = ("top", "bottom", "all", "none")

# Absorbs binary round-off in fraction * count (e.g. 0.29 * 100 -> 28.999...).
_COUNT_SLACK = 1e-9


@dataclass
class PruneConfig:
    base_fraction: float = 0.8
    n: int = 0
    k: float = 0.0
    policy: str = "none"
    prune_last_layer: bool = True

    def __post_init__(self):
        if not 0.0 <= self.base_fraction <= 1.0:
            raise ConfigError(f"base_fraction must lie in [0, 1], got {self.base_fraction}")
        if self.n < 0:
            raise ConfigError(f"n must be nonnegative, got {self.n}")
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")


@dataclass
class MaskSet:
    frozen_owner: list[np.ndarray]
    pruned_now: list[np.ndarray]
    frozen_tasks: set[int] = field(default_factory=set)
    shared: set[int] = field(default_factory=set)  # layers never pruned, frozen or masked

    @classmethod
    def fresh(cls, shapes: Iterable[tuple[int, int]]) -> "MaskSet":
        shapes = list(shapes)
        return cls(
            [np.zeros(s, dtype=np.int64) for s in shapes],
            [np.zeros(s, dtype=bool) for s in shapes],
        )

    @classmethod
    def for_network(cls, net) -> "MaskSet":
        return cls.fresh(w.shape for w in net.weights)

    @property
    def num_layers(self) -> int:
        return len(self.frozen_owner)

    def copy(self) -> "MaskSet":
        return MaskSet(
            [o.copy() for o in self.frozen_owner],
            [p.copy() for p in self.pruned_now],
            set(self.frozen_tasks),
            set(self.shared),
        )

    def free(self, layer: int) -> np.ndarray:
        return (self.frozen_owner[layer] == 0) & ~self.pruned_now[layer]

    def trainable(self) -> list[np.ndarray]:
        return [self.free(l) for l in range(self.num_layers)]

    def frozen_count(self, layer: int) -> int:
        return int(np.count_nonzero(self.frozen_owner[layer]))

    def task_view(self, task_id: int) -> list[np.ndarray]:
        """Weights usable by ``task_id``: frozen by it or by an earlier task."""
        return [
            np.ones(o.shape, dtype=bool) if l in self.shared else (o > 0) & (o <= task_id)
            for l, o in enumerate(self.frozen_owner)
        ]

    def check_compatible(self, net) -> None:
        if len(net.weights) != self.num_layers or any(
            w.shape != o.shape for w, o in zip(net.weights, self.frozen_owner)
        ):
            raise DimensionError("mask set does not match network shapes")


def select_layers(report: ConnectivityReport, policy: str, n: int) -> set[int]:
    """Layers whose pruning is reduced for the current task.

    Candidates are the layers carrying a connectivity value (each layer that
    feeds another layer).
    """
    if policy not in POLICIES:
        raise ConfigError(f"unknown policy {policy!r}")
    candidates = report.layers
    if policy == "none":
        return set()
    if policy == "all":
        return set(candidates)
    if n > len(candidates):
        raise ConfigError(f"n={n} exceeds the {len(candidates)} layers with a connectivity score")
    sign = -1.0 if policy == "top" else 1.0
    order = sorted(candidates, key=lambda l: sign * report.deltas[l])
    return set(order[:n])


def layer_fractions(cfg: PruneConfig, selected: set[int], num_layers: int) -> list[float]:
    out = []
    for l in range(num_layers):
        f = cfg.base_fraction - cfg.k / 100.0 if l in selected else cfg.base_fraction
        if not 0.0 <= f <= 1.0:
            clamped = min(max(f, 0.0), 1.0)
            log.info("layer %d pruning fraction %.4f clamped to %.4f", l, f, clamped)
            f = clamped
        out.append(f)
    return out


def prune_count(fraction: float, num_free: int) -> int:
    return int(math.floor(fraction * num_free + _COUNT_SLACK))


def magnitude_prune(
    weights: np.ndarray,
    frozen_owner: np.ndarray,
    fraction: float,
    pruned_now: np.ndarray | None = None,
) -> np.ndarray:
    """Zero the ``floor(fraction * num_free)`` smallest-magnitude free weights.

    ``weights`` is modified in place.  Ties go to the lower flat index.
    Returns the boolean pruned mask for this layer.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"fraction must lie in [0, 1], got {fraction}")
    if weights.shape != frozen_owner.shape:
        raise DimensionError("weights and mask shapes differ")
    free = frozen_owner == 0
    if pruned_now is not None:
        free &= ~pruned_now
    mask = np.zeros(weights.shape, dtype=bool)
    free_idx = np.flatnonzero(free)
    if free_idx.size == 0:
        log.warning("no free weights to prune")
        return mask
    count = prune_count(fraction, free_idx.size)
    order = np.argsort(np.abs(weights.ravel()[free_idx]), kind="stable")
    chosen = free_idx[order[:count]]
    mask.ravel()[chosen] = True
    weights.ravel()[chosen] = 0.0
    return mask


def prune_network(net, masks: MaskSet, fractions: Sequence[float]) -> MaskSet:
    """Apply ``magnitude_prune`` to every layer, recording the pruned masks."""
    masks.check_compatible(net)
    for l, (w, frac) in enumerate(zip(net.weights, fractions)):
        if l in masks.shared or not masks.free(l).any():
            continue
        masks.pruned_now[l] = masks.pruned_now[l] | magnitude_prune(
            w, masks.frozen_owner[l], frac, masks.pruned_now[l]
        )
    return masks


def freeze_survivors(masks: MaskSet, task_id: int) -> MaskSet:
    """Commit the current task: free unpruned weights become owned by it.

    Pruned weights return to the free pool for the next task.  Shared layers
    are left untouched.
    """
    if task_id < 1:
        raise ConfigError(f"task ids start at 1, got {task_id}")
    if task_id in masks.frozen_tasks:
        raise StateError(f"task {task_id} has already been frozen")
    if masks.frozen_tasks and task_id < max(masks.frozen_tasks):
        raise StateError(f"task {task_id} precedes already-frozen task {max(masks.frozen_tasks)}")
    for l in range(masks.num_layers):
        if l in masks.shared:
            continue
        survivors = (masks.frozen_owner[l] == 0) & ~masks.pruned_now[l]
        masks.frozen_owner[l][survivors] = task_id
        masks.pruned_now[l][:] = False
    masks.frozen_tasks.add(task_id)
    return masks


def sparsity(masks: MaskSet, layer: int, task_id: int) -> float:
    """Share of ``layer``'s weights frozen by ``task_id`` or an earlier task."""
    owner = masks.frozen_owner[layer]
    return float(np.count_nonzero((owner != 0) & (owner <= task_id))) / owner.size


def mask_rows(masks: MaskSet) -> list[tuple[int, int, int, int]]:
    rows = []
    for l, owner in enumerate(masks.frozen_owner):
        for r in range(owner.shape[0]):
            for c in range(owner.shape[1]):
                rows.append((l, r, c, int(owner[r, c])))
    return rows
