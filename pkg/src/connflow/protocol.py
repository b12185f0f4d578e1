"""Sequential-task driver: train -> measure connectivity -> prune ->
fine-tune -> freeze, plus performance and forgetting metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .connectivity import ConnectivityReport, compute_report
from .errors import ConfigError, ConnflowError, TrainingError
from .masking import (
    MaskSet,
    PruneConfig,
    freeze_survivors,
    layer_fractions,
    prune_network,
    select_layers,
)
from .nn import Network, backward, forward, loss_ce, per_sample_ce, sgd_step
from .data import TaskDataset

log = logging.getLogger(__name__)

EVAL_MODES = ("current_weights", "task_mask")


@dataclass
class TrainConfig:
    epochs: int = 20
    finetune_epochs: int = 5
    lr: float = 0.1
    batch_size: int = 32
    convergence_eps: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("epoch counts must be nonnegative")
        if not self.lr > 0 or self.batch_size < 1 or not self.convergence_eps > 0:
            raise ConfigError("lr, batch_size and convergence_eps must be positive")


@dataclass(frozen=True)
class LabelEncoding:
    """Class index ``c`` maps to weight ``c + 1`` (or 1 for every class)."""

    unweighted: bool = False

    def __call__(self, labels) -> np.ndarray:
        labels = np.asarray(labels)
        if self.unweighted:
            return np.ones(labels.shape, dtype=np.float64)
        return labels.astype(np.float64) + 1.0


@dataclass
class TrainResult:
    curve: list[float]
    converged: bool
    epochs_run: int


def _full_loss(net: Network, x: np.ndarray, y: np.ndarray) -> float:
    logits, _ = forward(net, x)
    return loss_ce(logits, y)[0]


def train_task(
    net: Network,
    masks: MaskSet | None,
    dataset: TaskDataset,
    cfg: TrainConfig,
    epochs: int | None = None,
    trainable: list[np.ndarray] | None = None,
    phase: int = 0,
) -> tuple[Network, TrainResult]:
    """Minibatch SGD on the free weights of ``net`` (updated in place).

    Stops after ``epochs`` (default ``cfg.epochs``) or once the full
    training-set loss improves by less than ``cfg.convergence_eps`` over an
    epoch.  Shuffling is seeded by ``(cfg.seed, task_id, phase)``.
    """
    if len(dataset.x_train) == 0:
        raise ConfigError("empty training set")
    epochs = cfg.epochs if epochs is None else epochs
    if trainable is None and masks is not None:
        masks.check_compatible(net)
        trainable = masks.trainable()
    rng = np.random.default_rng([cfg.seed, dataset.task_id, phase])
    x, y = dataset.x_train, dataset.y_train
    n = len(x)
    curve: list[float] = []
    prev = _full_loss(net, x, y) if epochs else None
    converged = False
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits, trace = forward(net, x[idx])
            _, g_logits = loss_ce(logits, y[idx])
            sgd_step(net, backward(net, trace, g_logits), cfg.lr, trainable)
        loss = _full_loss(net, x, y)
        if not np.isfinite(loss):
            raise TrainingError(
                f"task {dataset.task_id}: loss became {loss} at epoch {epoch + 1} (lr={cfg.lr})"
            )
        curve.append(loss)
        if prev - loss < cfg.convergence_eps:
            converged = True
            break
        prev = loss
    return net, TrainResult(curve, converged, len(curve))


def masked_network(net: Network, masks: MaskSet, task_id: int) -> Network:
    """Copy of ``net`` keeping only weights frozen by tasks ``<= task_id``."""
    out = net.copy()
    for w, keep in zip(out.weights, masks.task_view(task_id)):
        w[~keep] = 0.0
    return out


def eval_task(
    net: Network,
    task: TaskDataset,
    mode: str = "current_weights",
    masks: MaskSet | None = None,
) -> tuple[float, float]:
    """Mean eval-split cross-entropy and accuracy."""
    if mode not in EVAL_MODES:
        raise ConfigError(f"unknown eval mode {mode!r}")
    if mode == "task_mask":
        if masks is None:
            raise ConfigError("task_mask mode needs the mask set")
        net = masked_network(net, masks, task.task_id)
    logits, _ = forward(net, task.x_eval)
    loss, _ = loss_ce(logits, task.y_eval)
    acc = float(np.mean(np.argmax(logits, axis=1) == task.y_eval))
    return loss, acc


def per_sample_losses(net: Network, task: TaskDataset) -> np.ndarray:
    logits, _ = forward(net, task.x_eval)
    return per_sample_ce(logits, task.y_eval)


def expected_forgetting(
    net_t: Network, net_t1: Network, task: TaskDataset, encoding: LabelEncoding = LabelEncoding()
) -> float:
    """Label-weighted mean absolute per-sample loss change on ``task``."""
    diff = per_sample_losses(net_t1, task) - per_sample_losses(net_t, task)
    return float(np.mean(encoding(task.y_eval) * np.abs(diff)))


@dataclass
class RunRecord:
    """Everything measured along one task sequence.

    Matrices are indexed ``[evaluated task][after task]`` with zero-based
    positions; ``loss_matrix`` holds post-freeze, live-weight losses.
    """

    num_tasks: int
    loss_matrix: np.ndarray
    acc_matrix: np.ndarray
    pre_prune_loss: np.ndarray
    pre_prune_acc: np.ndarray
    recall_loss: np.ndarray
    recall_acc: np.ndarray
    reports: list[ConnectivityReport] = field(default_factory=list)
    selected: list[list[int]] = field(default_factory=list)
    fractions: list[list[float]] = field(default_factory=list)
    curves: list[list[float]] = field(default_factory=list)
    checkpoints: list[Network] = field(default_factory=list)
    trained_checkpoints: list[Network] = field(default_factory=list)
    mask_history: list[MaskSet] = field(default_factory=list)
    forgetting: list[float] = field(default_factory=list)
    expected_forgetting: list[float] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    failure: str | None = None

    @classmethod
    def empty(cls, num_tasks: int) -> "RunRecord":
        def nan():
            return np.full((num_tasks, num_tasks), np.nan)

        return cls(num_tasks, nan(), nan(), nan(), nan(), nan(), nan())

    def final_accuracy(self, mode: str = "task_mask") -> float:
        """Mean accuracy over all tasks after the last task was committed."""
        m = self.recall_acc if mode == "task_mask" else self.acc_matrix
        return float(np.mean(m[:, -1]))


def forgetting(record: RunRecord) -> list[float]:
    """``O_t = L[t][t+1] - L[t][t]`` for every task that has a successor."""
    L = record.loss_matrix
    return [float(L[t, t + 1] - L[t, t]) for t in range(record.num_tasks - 1)]


def run_sequence(
    net: Network,
    tasks: Sequence[TaskDataset],
    prune_cfg: PruneConfig,
    train_cfg: TrainConfig,
    probe_size: int = 512,
    per_class: bool = True,
    eta: float | None = None,
    encoding: LabelEncoding = LabelEncoding(),
    on_task: Callable[[int, RunRecord], None] | None = None,
) -> RunRecord:
    """Train ``tasks`` in order on one network with per-task freeze masks.

    ``net`` is trained in place.  On failure the partially filled record is
    attached to the raised exception as ``partial_record``.
    """
    if len(tasks) < 1:
        raise ConfigError("need at least one task")
    T = len(tasks)
    masks = MaskSet.for_network(net)
    if not prune_cfg.prune_last_layer:
        masks.shared.add(net.num_layers - 1)
    record = RunRecord.empty(T)
    try:
        for s, task in enumerate(tasks):
            _, res = train_task(net, masks, task, train_cfg, phase=0)
            record.curves.append(res.curve)
            for t, other in enumerate(tasks):
                record.pre_prune_loss[t, s], record.pre_prune_acc[t, s] = eval_task(net, other)
            record.trained_checkpoints.append(net.copy())

            probe = slice(0, min(probe_size, len(task.x_eval)))
            report = compute_report(
                net, task.x_eval[probe], task.y_eval[probe], task.task_id, per_class, eta=eta
            )
            record.reports.append(report)
            selected = select_layers(report, prune_cfg.policy, prune_cfg.n)
            fracs = layer_fractions(prune_cfg, selected, net.num_layers)
            record.selected.append(sorted(selected))
            record.fractions.append(fracs)

            prune_network(net, masks, fracs)
            if train_cfg.finetune_epochs:
                train_task(net, masks, task, train_cfg, epochs=train_cfg.finetune_epochs, phase=1)
            freeze_survivors(masks, task.task_id)
            record.checkpoints.append(net.copy())
            record.mask_history.append(masks.copy())

            for t, other in enumerate(tasks):
                record.loss_matrix[t, s], record.acc_matrix[t, s] = eval_task(net, other)
                if t <= s:
                    record.recall_loss[t, s], record.recall_acc[t, s] = eval_task(
                        net, other, "task_mask", masks
                    )
            log.info(
                "task %d: loss %.4f acc %.4f deltas %s",
                task.task_id, record.loss_matrix[s, s], record.acc_matrix[s, s],
                " ".join(f"{d:.3f}" for d in report.deltas),
            )
            if on_task is not None:
                on_task(s, record)
    except ConnflowError as exc:
        record.failure = f"{type(exc).__name__}: {exc}"
        exc.partial_record = record  # type: ignore[attr-defined]
        raise

    record.forgetting = forgetting(record)
    record.expected_forgetting = [
        expected_forgetting(record.checkpoints[t], record.checkpoints[t + 1], tasks[t], encoding)
        for t in range(T - 1)
    ]
    return record


@dataclass
class FrozenLayerResult:
    layer: int | None
    d: float
    delta_t: float
    loss_full: float
    loss_frozen: float


def frozen_layer_experiment(
    net_init: Network,
    task: TaskDataset,
    layer: int | None,
    cfg: TrainConfig,
    encoding: LabelEncoding = LabelEncoding(),
) -> FrozenLayerResult:
    """Train from ``net_init`` twice, once with ``layer`` held at its initial
    values, and compare the two optima on the eval split.

    ``delta_t`` is the loss of the unconstrained network minus the loss of the
    frozen one; ``d`` is the label-weighted per-sample mean of that difference.
    """
    full, _ = train_task(net_init.copy(), None, task, cfg)
    trainable = [np.ones(w.shape, dtype=bool) for w in net_init.weights]
    if layer is not None:
        if not 0 <= layer < net_init.num_layers:
            raise ConfigError(f"layer {layer} out of range")
        trainable[layer][:] = False
    frozen, _ = train_task(net_init.copy(), None, task, cfg, trainable=trainable)
    ls_full = per_sample_losses(full, task)
    ls_frozen = per_sample_losses(frozen, task)
    diff = ls_full - ls_frozen
    return FrozenLayerResult(
        layer,
        float(np.mean(encoding(task.y_eval) * diff)),
        float(np.mean(ls_full) - np.mean(ls_frozen)),
        float(np.mean(ls_full)),
        float(np.mean(ls_frozen)),
    )
