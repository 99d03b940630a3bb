"""Error as a function of a forced group count K, next to the free-running HCCT result."""
import argparse
import csv
from dataclasses import replace
from pathlib import Path

import numpy as np

from fedsilo.config import parse_config
from fedsilo.fed_train import run_experiment

ROOT = Path(__file__).resolve().parent.parent


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=ROOT / "configs" / "compare.toml")
    parser.add_argument("--ks", type=int, nargs="+", default=None, help="default: 1 2 5 10 N")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--out", default="runs/fixed_k.csv")
    args = parser.parse_args()

    cfg = parse_config(args.config)
    n = cfg.scenario.n_clients
    ks = sorted({k for k in (args.ks or [1, 2, 5, 10, n]) if k <= n})
    rows = []
    for k in [*ks, None]:
        errs = [run_experiment(replace(cfg, scheme="hcct", forced_k=k), s).final_stats()["mean"]
                for s in args.seeds]
        label = "free" if k is None else k
        rows.append({"K": label, "mean": float(np.mean(errs)), "std": float(np.std(errs))})
        print(f"K={label!s:<5} error {100 * np.mean(errs):6.2f} +- {100 * np.std(errs):5.2f}")

    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["K", "mean", "std"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


if __name__ == "__main__":
    main()
