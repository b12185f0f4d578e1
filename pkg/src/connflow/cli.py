"""Command-line entry point: ``connflow {run,connectivity,theory,frozen-sweep}``."""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .connectivity import compute_report, rank_layers
from .errors import ConnflowError
from .experiment import (
    build_network,
    build_tasks,
    encoding,
    find_trial_dirs,
    load_trial,
    replay_connectivity,
    run_experiment,
    train_config,
)
from .io import text_hash, write_csv
from .config import dump_config
from .protocol import frozen_layer_experiment, train_task
from .theory import rank_correlation, theory_report

log = logging.getLogger("connflow")


def cmd_run(config_path, out=None, seed_offset=0, trials=None) -> int:
    cfg = load_config(config_path)
    results = run_experiment(cfg, out, seed_offset, trials)
    root = Path(out or cfg.run.out) / cfg.run.name
    for (policy, n, k), records in results.items():
        accs = [r.final_accuracy() for r in records]
        print(f"{policy:>6} n={n} k={k:g}: avg_acc {np.mean(accs):.4f} +- {np.std(accs, ddof=1) if len(accs) > 1 else 0.0:.4f} over {len(accs)} trial(s)")
    print(f"wrote {root}")
    return 0


def cmd_connectivity(run_dir) -> int:
    trials = find_trial_dirs(run_dir)
    if not trials:
        raise FileNotFoundError(f"no run artifacts under {run_dir}")
    mismatches = 0
    for trial_dir in trials:
        trial = load_trial(trial_dir)
        replayed = replay_connectivity(trial)
        for stored, fresh in zip(trial.reports, replayed):
            if stored.deltas != fresh.deltas:
                mismatches += 1
                print(f"{trial_dir}: task {stored.task_id} replay differs from stored connectivity", file=sys.stderr)
        num_layers = max(len(r.deltas) for r in trial.reports)
        write_csv(
            trial_dir / "connectivity_table.csv",
            ["task"] + [f"layer{l}" for l in range(num_layers)] + ["ranking"],
            (
                [r.task_id, *r.deltas, " ".join(map(str, rank_layers(r)))]
                for r in trial.reports
            ),
            trial.meta,
        )
        write_csv(
            trial_dir / "connectivity_long.csv",
            ["task", "layer", "delta"],
            (row for r in trial.reports for row in r.rows()),
            trial.meta,
        )
        print(f"{trial_dir}: {len(trial.reports)} tasks x {num_layers} layer pairs")
    return 1 if mismatches else 0


def cmd_theory(run_dir) -> int:
    trials = find_trial_dirs(run_dir)
    if not trials:
        raise FileNotFoundError(f"no run artifacts under {run_dir}")
    for trial_dir in trials:
        trial = load_trial(trial_dir)
        top = [rank_layers(r)[0] for r in trial.reports]
        rows = theory_report(
            trial.checkpoints,
            trial.trained_checkpoints,
            trial.tasks,
            trial.cfg.train.convergence_eps,
            encoding(trial.cfg),
            prune_layers=top,
            iters=trial.cfg.theory.iters,
            tol=trial.cfg.theory.tol,
            seed=trial.cfg.run.seed,
        )
        write_csv(
            trial_dir / "theory_report.csv",
            [
                "task", "lambda_max", "C", "C_eps", "eo_measured", "eo_bound", "bound_satisfied",
                "lambda_residual", "frob_layer", "frob_bound", "frob_actual", "taylor_residual",
            ],
            (
                (r.task, r.lambda_max, r.C, r.C_eps, r.eo_measured, r.eo_bound, r.bound_satisfied,
                 r.lambda_residual, r.frob_layer, r.frob_bound, r.frob_actual, r.taylor_residual)
                for r in rows
            ),
            trial.meta,
        )
        ok = sum(r.bound_satisfied for r in rows)
        print(f"{trial_dir}: bound satisfied for {ok}/{len(rows)} tasks")
    return 0


def frozen_sweep(cfg, seed: int):
    """Per-layer freeze experiment on the first task of ``cfg``."""
    tasks = build_tasks(cfg)
    task = tasks[0]
    net0 = build_network(cfg, tasks, seed)
    tcfg = train_config(cfg, seed)
    trained, _ = train_task(net0.copy(), None, task, tcfg)
    probe = slice(0, min(cfg.run.probe_size, len(task.x_eval)))
    report = compute_report(trained, task.x_eval[probe], task.y_eval[probe], task.task_id, cfg.run.per_class)
    rows = []
    for layer in range(net0.num_layers):
        res = frozen_layer_experiment(net0, task, layer, tcfg, encoding(cfg))
        delta = report.deltas[layer] if layer < len(report.deltas) else math.nan
        rows.append((layer, delta, res.d, res.delta_t))
    scored = [(r[1], abs(r[2])) for r in rows if not math.isnan(r[1])]
    corr = rank_correlation([s[0] for s in scored], [s[1] for s in scored])
    return rows, corr


def cmd_frozen_sweep(config_path, out=None, seed_offset=0) -> int:
    cfg = load_config(config_path)
    seed = cfg.run.seed + seed_offset
    rows, corr = frozen_sweep(cfg, seed)
    root = Path(out or cfg.run.out) / cfg.run.name
    root.mkdir(parents=True, exist_ok=True)
    meta = {"config_hash": text_hash(dump_config(cfg)), "seed": seed}
    write_csv(root / "frozen_sweep.csv", ["layer", "delta", "d", "delta_t"], rows, meta)
    write_csv(
        root / "frozen_sweep_corr.csv",
        ["pearson_r", "spearman_r", "status"],
        [(corr.pearson_r, corr.spearman_r, corr.status)],
        meta,
    )
    for layer, delta, d, dt in rows:
        print(f"layer {layer}: delta {delta:.4f} d {d:.4f} delta_t {dt:.4f}")
    print(f"spearman(delta, |d|) = {corr.spearman_r:.4f} ({corr.status})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="connflow", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train task sequences and write CSV artifacts")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--seed-offset", type=int, default=0)
    r.add_argument("--trials", type=int)

    c = sub.add_parser("connectivity", help="per-layer per-task connectivity tables")
    c.add_argument("run_dir")

    t = sub.add_parser("theory", help="Hessian eigenvalue and forgetting-bound report")
    t.add_argument("run_dir")

    f = sub.add_parser("frozen-sweep", help="freeze each layer in turn on the first task")
    f.add_argument("--config", required=True)
    f.add_argument("--out")
    f.add_argument("--seed-offset", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.seed_offset, args.trials)
        if args.command == "connectivity":
            return cmd_connectivity(args.run_dir)
        if args.command == "theory":
            return cmd_theory(args.run_dir)
        return cmd_frozen_sweep(args.config, args.out, args.seed_offset)
    except (ConnflowError, FileNotFoundError, ValueError) as exc:
        print(f"connflow: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
