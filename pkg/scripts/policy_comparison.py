"""Top-n vs bottom-n vs baseline pruning on the class-pair split benchmark.

Prints average task-mask accuracy per (policy, n) with the seed spread.

    python scripts/policy_comparison.py [--out runs] [--config configs/split.ini]
"""
import argparse
import sys
from pathlib import Path

from connflow.cli import main
from connflow.config import load_config
from connflow.io import read_csv

ROOT = Path(__file__).resolve().parent.parent


def table(comparison: Path) -> str:
    rows = read_csv(comparison)
    lines = [f"{'policy':>7} {'n':>2}  {'avg acc':>8}  {'sd':>7}"]
    for r in rows:
        lines.append(f"{r['policy']:>7} {r['n']:>2}  {float(r['avg_acc_mean']):8.4f}  {float(r['avg_acc_std']):7.4f}")
    return "\n".join(lines)


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs")
    p.add_argument("--config", default=str(ROOT / "configs" / "split.ini"))
    args = p.parse_args()
    code = main(["run", "--config", args.config, "--out", args.out])
    if code == 0:
        print(table(Path(args.out) / load_config(args.config).run.name / "comparison.csv"))
    sys.exit(code)
