"""Per-client test error on the three-client example for several schemes.

    python scripts/motivating_table.py [--seeds 0 1 2 3 4] [--out runs/motivating_table.csv]
"""
import argparse
import csv
from dataclasses import replace
from pathlib import Path

import numpy as np

from fedsilo.config import parse_config
from fedsilo.fed_train import run_experiment

ROOT = Path(__file__).resolve().parent.parent
SCHEMES = ("independent", "global", "hcct", "hcct_e", "hcct_p")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=ROOT / "configs" / "motivating.toml")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--out", default="runs/motivating_table.csv")
    args = parser.parse_args()

    cfg = parse_config(args.config)
    rows = []
    for scheme in SCHEMES:
        per_client = []
        partitions = []
        for seed in args.seeds:
            log = run_experiment(replace(cfg, scheme=scheme), seed)
            per_client.append(log.final.test_error)
            partitions.append(log.final_partition())
        err = np.mean(per_client, axis=0)
        rows.append({"scheme": scheme, **{f"client{i}": round(float(e), 4) for i, e in enumerate(err)},
                     "mean": round(float(err.mean()), 4), "partition_seed0": partitions[0]})
        print(f"{scheme:<12}" + " ".join(f"{100 * e:6.2f}" for e in err)
              + f"   mean {100 * err.mean():6.2f}   {partitions[0]}")

    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


if __name__ == "__main__":
    main()
