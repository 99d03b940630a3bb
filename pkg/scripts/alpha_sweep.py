"""Final mean error over train-split ratio x alpha on the label-shard scenario.

Writes one row per (split, alpha, seed). Equivalent to
    fedsilo sweep --config configs/label_shards.toml --grid split=... --grid alpha=...
"""
import argparse
import csv
import itertools
from pathlib import Path

from fedsilo.config import parse_config
from fedsilo.fed_train import run_experiment

ROOT = Path(__file__).resolve().parent.parent


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=ROOT / "configs" / "label_shards.toml")
    parser.add_argument("--splits", type=float, nargs="+", default=[0.05, 0.1, 0.2, 0.5])
    parser.add_argument("--alphas", type=float, nargs="+", default=[1.0, 10.0, 100.0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--out", default="runs/alpha_sweep.csv")
    args = parser.parse_args()

    rows = []
    for split, alpha in itertools.product(args.splits, args.alphas):
        cfg = parse_config(args.config, [f"split={split}", f"alpha={alpha}"])
        for seed in args.seeds:
            log = run_experiment(cfg, seed)
            stats = log.final_stats()
            rows.append({"split": split, "alpha": alpha, "seed": seed, "mean": stats["mean"],
                         "n_groups": len(log.final_partition())})
        errs = [r["mean"] for r in rows[-len(args.seeds):]]
        print(f"split {split:<5} alpha {alpha:<6} error {100 * sum(errs) / len(errs):6.2f}")

    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


if __name__ == "__main__":
    main()
