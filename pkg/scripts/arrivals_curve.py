"""Per-epoch mean error of the original clients with and without late arrivals."""
import argparse
import csv
from dataclasses import replace
from pathlib import Path

import numpy as np

from fedsilo.config import parse_config
from fedsilo.fed_train import run_experiment

ROOT = Path(__file__).resolve().parent.parent


def curve(cfg, seeds):
    originals = set(range(cfg.scenario.n_clients))
    out = []
    for seed in seeds:
        log = run_experiment(cfg, seed)
        out.append([np.mean([e for c, e in zip(r.clients, r.test_error) if c in originals])
                    for r in log.records])
    return np.mean(out, axis=0)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=ROOT / "configs" / "arrivals.toml")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--out", default="runs/arrivals_curve.csv")
    args = parser.parse_args()

    cfg = parse_config(args.config)
    with_new = curve(cfg, args.seeds)
    without = curve(replace(cfg, arrivals={}), args.seeds)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "with_arrivals", "without_arrivals"])
        for t, (a, b) in enumerate(zip(with_new, without)):
            writer.writerow([t, a, b])
    print(f"final error: with arrivals {100 * with_new[-1]:.2f}, without {100 * without[-1]:.2f}")


if __name__ == "__main__":
    main()
