"""Reference permuted-digits run followed by the connectivity and theory reports.

    python scripts/run_reference.py [--out runs] [--trials 1]
"""
import argparse
import sys
import time
from pathlib import Path

from connflow.cli import main

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "reference.ini"


def run(out: str, trials: int) -> int:
    start = time.perf_counter()
    code = main(["run", "--config", str(CONFIG), "--out", out, "--trials", str(trials)])
    if code:
        return code
    root = str(Path(out) / "reference")
    code = main(["connectivity", root]) or main(["theory", root])
    print(f"total {time.perf_counter() - start:.1f}s")
    return code


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs")
    p.add_argument("--trials", type=int, default=1)
    args = p.parse_args()
    sys.exit(run(args.out, args.trials))
