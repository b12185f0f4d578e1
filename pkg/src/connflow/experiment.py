"""Config-driven experiment runs and the artifact layout on disk.

Layout of one ``run``::

    <out>/<name>/comparison.csv
    <out>/<name>/<policy>_n<n>_k<k>/summary.csv
    <out>/<name>/<policy>_n<n>_k<k>/seed<s>/{config.ini, manifest.txt,
        loss_matrix.csv, acc_matrix.csv, recall_loss.csv, recall_acc.csv,
        forgetting.csv, connectivity_task<t>.csv, checkpoints/*.cfw}
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from .config import ExperimentConfig, dump_config, load_config
from .connectivity import ConnectivityReport, compute_report
from .io import load_network, read_csv, save_network, text_hash, write_csv
from .masking import PruneConfig, mask_rows
from .nn import LayerSpec, Network, init_network
from .protocol import LabelEncoding, RunRecord, TrainConfig, run_sequence

log = logging.getLogger(__name__)

DEFAULT_N_TRAIN = {"idx": 2000, "digits": 1297, "synthetic": 1000}


def resolve_dataset(cfg: ExperimentConfig) -> str:
    choice = cfg.data.dataset
    if choice != "auto":
        return choice
    if D.find_idx_files(D.data_dir_from_env()) is not None:
        return "idx"
    try:
        import sklearn.datasets  # noqa: F401
    except ImportError:
        return "synthetic"
    return "digits"


def build_tasks(cfg: ExperimentConfig) -> list[D.TaskDataset]:
    d = cfg.data
    source = resolve_dataset(cfg)
    n_train = d.n_train or DEFAULT_N_TRAIN[source]
    if source == "idx":
        base = D.load_idx_base(D.data_dir_from_env(), d.downscale, n_train, d.n_eval, d.data_seed)
    elif source == "digits":
        base = D.load_digits_base(n_train, d.n_eval, d.data_seed)
    else:
        base = D.synthetic_gaussian_tasks(1, d.classes, d.dim, d.separation, d.data_seed, n_train, d.n_eval)[0]
    if d.benchmark == "permuted":
        return D.permuted_tasks(base, d.num_tasks, d.data_seed)
    parts = D.pair_partitions(base.num_classes)
    if d.num_tasks > len(parts):
        raise ValueError(f"split benchmark has only {len(parts)} class pairs")
    return D.split_tasks(base, parts[: d.num_tasks])


def layer_specs(cfg: ExperimentConfig, input_dim: int, num_classes: int) -> list[LayerSpec]:
    return init_network(network_dims(cfg, input_dim, num_classes), cfg.network.activation).layers


def network_dims(cfg: ExperimentConfig, input_dim: int, num_classes: int) -> list[int]:
    return [input_dim, *cfg.network.hidden, num_classes]


def build_network(cfg: ExperimentConfig, tasks, seed: int) -> Network:
    k = max(t.num_classes for t in tasks)
    return init_network(
        network_dims(cfg, tasks[0].input_dim, k), cfg.network.activation, seed=seed, bias=cfg.network.bias
    )


def train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    t = cfg.train
    return TrainConfig(t.epochs, t.finetune_epochs, t.lr, t.batch_size, t.convergence_eps, seed)


def encoding(cfg: ExperimentConfig) -> LabelEncoding:
    return LabelEncoding(unweighted=cfg.run.encoding == "unweighted")


def cell_name(policy: str, n: int, k: float) -> str:
    return f"{policy}_n{n}_k{k:g}"


def cell_config(cfg: ExperimentConfig, policy: str, n: int, k: float, seed: int) -> ExperimentConfig:
    """Single-trial, single-cell copy of ``cfg``; this is what gets persisted."""
    out = copy.deepcopy(cfg)
    out.prune.policy, out.prune.n, out.prune.k = [policy], [n], [k]
    out.run.seed, out.run.trials = seed, 1
    return out


def prune_config(cfg: ExperimentConfig) -> PruneConfig:
    p = cfg.prune
    return PruneConfig(p.base_fraction, p.n[0], p.k[0], p.policy[0], p.prune_last_layer)


def run_trial(cfg: ExperimentConfig, tasks=None) -> RunRecord:
    """Run the single cell/seed described by ``cfg`` (see ``cell_config``)."""
    tasks = build_tasks(cfg) if tasks is None else tasks
    net = build_network(cfg, tasks, cfg.run.seed)
    record = run_sequence(
        net,
        tasks,
        prune_config(cfg),
        train_config(cfg, cfg.run.seed),
        probe_size=cfg.run.probe_size,
        per_class=cfg.run.per_class,
        eta=cfg.run.eta,
        encoding=encoding(cfg),
    )
    record.metadata = {"config_hash": text_hash(dump_config(cfg)), "seed": cfg.run.seed}
    return record


def write_trial(record: RunRecord, cfg: ExperimentConfig, tasks, trial_dir) -> None:
    trial_dir = Path(trial_dir)
    (trial_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    text = dump_config(cfg)
    (trial_dir / "config.ini").write_text(text)
    meta = {"config_hash": text_hash(text), "seed": cfg.run.seed}
    T = record.num_tasks
    ids = [t.task_id for t in tasks]
    header = ["task"] + [f"after_{i}" for i in ids]

    def matrix(name, m):
        write_csv(trial_dir / name, header, ([ids[r], *m[r]] for r in range(T)), meta)

    matrix("loss_matrix.csv", record.loss_matrix)
    matrix("acc_matrix.csv", record.acc_matrix)
    matrix("recall_loss.csv", record.recall_loss)
    matrix("recall_acc.csv", record.recall_acc)
    write_csv(
        trial_dir / "forgetting.csv",
        ["task", "O_t", "EO_t"],
        ((ids[t], record.forgetting[t], record.expected_forgetting[t]) for t in range(T - 1)),
        meta,
    )
    for s, rep in enumerate(record.reports):
        write_csv(trial_dir / f"connectivity_task{ids[s]}.csv", ["task_id", "layer", "delta"], rep.rows(), meta)
        if cfg.run.write_pairs:
            write_csv(
                trial_dir / f"connectivity_pairs_task{ids[s]}.csv",
                ["task_id", "layer", "i", "j", "rho"],
                rep.long_rows(),
                meta,
            )
    write_csv(
        trial_dir / "pruning.csv",
        ["task", "layer", "selected", "fraction"],
        (
            (ids[s], l, l in record.selected[s], f)
            for s in range(T)
            for l, f in enumerate(record.fractions[s])
        ),
        meta,
    )
    for s in range(T):
        save_network(record.trained_checkpoints[s], trial_dir / "checkpoints" / f"task{ids[s]}_trained.cfw")
        save_network(record.checkpoints[s], trial_dir / "checkpoints" / f"task{ids[s]}_final.cfw")
        if cfg.run.write_masks:
            write_csv(
                trial_dir / f"masks_task{ids[s]}.csv",
                ["layer", "row", "col", "frozen_owner"],
                mask_rows(record.mask_history[s]),
                meta,
            )
    write_manifest(cfg, tasks, trial_dir / "manifest.txt")


def write_manifest(cfg: ExperimentConfig, tasks, path) -> None:
    source = tasks[0].provenance
    lines = [
        f"provenance = {source}",
        f"data_dir = {D.data_dir_from_env() or ''}" if source == "idx" else "data_dir =",
        f"benchmark = {cfg.data.benchmark}",
        f"data_seed = {cfg.data.data_seed}",
        f"seed = {cfg.run.seed}",
        f"num_tasks = {len(tasks)}",
        f"input_dim = {tasks[0].input_dim}",
    ]
    for t in tasks:
        extra = f" classes={','.join(map(str, t.classes))}" if t.classes else ""
        lines.append(f"task {t.task_id}: train={len(t.x_train)} eval={len(t.x_eval)} num_classes={t.num_classes}{extra}")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class TrialSummary:
    seed: int
    avg_acc: float
    avg_acc_current: float
    mean_forgetting: float
    mean_expected_forgetting: float


def summarize(record: RunRecord, seed: int) -> TrialSummary:
    def mean(v):
        return float(np.mean(v)) if len(v) else float("nan")

    return TrialSummary(
        seed,
        record.final_accuracy("task_mask"),
        record.final_accuracy("current_weights"),
        mean(record.forgetting),
        mean(record.expected_forgetting),
    )


def _std(values) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def write_summary(summaries: list[TrialSummary], path, meta) -> None:
    cols = ["avg_acc", "avg_acc_current", "mean_forgetting", "mean_expected_forgetting"]
    rows = [(f"seed{s.seed}", *(getattr(s, c) for c in cols)) for s in summaries]
    rows.append(("mean", *(float(np.mean([getattr(s, c) for s in summaries])) for c in cols)))
    rows.append(("std", *(_std([getattr(s, c) for s in summaries]) for c in cols)))
    write_csv(path, ["trial", *cols], rows, meta)


def trial_seeds(cfg: ExperimentConfig, seed_offset: int = 0, trials: int | None = None) -> list[int]:
    n = cfg.run.trials if trials is None else trials
    return [cfg.run.seed + seed_offset + i for i in range(n)]


def run_experiment(
    cfg: ExperimentConfig,
    out: str | None = None,
    seed_offset: int = 0,
    trials: int | None = None,
) -> dict[tuple[str, int, float], list[RunRecord]]:
    """Every grid cell x trial seed; artifacts written under ``out/name``."""
    root = Path(out or cfg.run.out) / cfg.run.name
    tasks = build_tasks(cfg)
    seeds = trial_seeds(cfg, seed_offset, trials)
    base_hash = text_hash(dump_config(cfg))
    results: dict[tuple[str, int, float], list[RunRecord]] = {}
    comparison = []
    for policy, n, k in cfg.grid():
        cell_dir = root / cell_name(policy, n, k)
        records, summaries = [], []
        for seed in seeds:
            ccfg = cell_config(cfg, policy, n, k, seed)
            record = run_trial(ccfg, tasks)
            write_trial(record, ccfg, tasks, cell_dir / f"seed{seed}")
            records.append(record)
            summaries.append(summarize(record, seed))
        cell_meta = {"config_hash": base_hash, "seed": ",".join(map(str, seeds))}
        write_summary(summaries, cell_dir / "summary.csv", cell_meta)
        accs = [s.avg_acc for s in summaries]
        cur = [s.avg_acc_current for s in summaries]
        comparison.append(
            (policy, n, k, len(seeds), float(np.mean(accs)), _std(accs), float(np.mean(cur)), _std(cur))
        )
        results[(policy, n, k)] = records
    write_csv(
        root / "comparison.csv",
        ["policy", "n", "k", "trials", "avg_acc_mean", "avg_acc_std", "avg_acc_current_mean", "avg_acc_current_std"],
        comparison,
        {"config_hash": base_hash, "seed": ",".join(map(str, seeds))},
    )
    return results


def find_trial_dirs(run_dir) -> list[Path]:
    root = Path(run_dir)
    if (root / "config.ini").exists():
        return [root]
    return sorted(p.parent for p in root.rglob("config.ini"))


@dataclass
class LoadedTrial:
    cfg: ExperimentConfig
    tasks: list
    checkpoints: list[Network]
    trained_checkpoints: list[Network]
    reports: list[ConnectivityReport]
    meta: dict


def load_trial(trial_dir) -> LoadedTrial:
    """Rebuild tasks from the stored config and read checkpoints and reports."""
    trial_dir = Path(trial_dir)
    cfg = load_config(trial_dir / "config.ini")
    tasks = build_tasks(cfg)
    specs = layer_specs(cfg, tasks[0].input_dim, max(t.num_classes for t in tasks))
    ckpt = trial_dir / "checkpoints"
    finals, trained, reports = [], [], []
    for t in tasks:
        final_path = ckpt / f"task{t.task_id}_final.cfw"
        trained_path = ckpt / f"task{t.task_id}_trained.cfw"
        if not final_path.exists() or not trained_path.exists():
            raise FileNotFoundError(f"missing checkpoint for task {t.task_id} in {ckpt}")
        finals.append(load_network(final_path, specs, cfg.network.bias))
        trained.append(load_network(trained_path, specs, cfg.network.bias))
        conn = trial_dir / f"connectivity_task{t.task_id}.csv"
        if not conn.exists():
            raise FileNotFoundError(f"missing {conn}")
        rows = read_csv(conn)
        reports.append(ConnectivityReport(t.task_id, [float(r["delta"]) for r in rows]))
    meta = {"config_hash": text_hash((trial_dir / "config.ini").read_text()), "seed": cfg.run.seed}
    return LoadedTrial(cfg, tasks, finals, trained, reports, meta)


def replay_connectivity(trial: LoadedTrial) -> list[ConnectivityReport]:
    """Recompute every task's report from its pre-pruning checkpoint."""
    out = []
    for t, net in zip(trial.tasks, trial.trained_checkpoints):
        probe = slice(0, min(trial.cfg.run.probe_size, len(t.x_eval)))
        out.append(
            compute_report(net, t.x_eval[probe], t.y_eval[probe], t.task_id, trial.cfg.run.per_class, eta=trial.cfg.run.eta)
        )
    return out
