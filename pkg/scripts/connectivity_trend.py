"""Per-task layer connectivity over several seeds of the reference config.

    python scripts/connectivity_trend.py [--out runs] [--trials 3]
"""
import argparse
from pathlib import Path

import numpy as np

from connflow.config import load_config
from connflow.experiment import run_experiment

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "reference.ini"

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs")
    p.add_argument("--trials", type=int, default=3)
    args = p.parse_args()
    cfg = load_config(CONFIG)
    cfg.run.name = "connectivity_trend"
    for cell, records in run_experiment(cfg, args.out, trials=args.trials).items():
        for rec in records:
            d = np.array([r.deltas for r in rec.reports])
            print(f"seed {rec.metadata['seed']}  (rows: layer pair, cols: task)")
            print(np.array2string(d.T, precision=3))
            print(f"  first pair nondecreasing: {bool(np.all(np.diff(d[:, 0]) >= 0))}"
                  f"  last pair nonincreasing: {bool(np.all(np.diff(d[:, -1]) <= 0))}")
