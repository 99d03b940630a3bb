"""Command line entry point: ``fedsilo run|sweep|compare``."""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import SCHEMES, apply_overrides, from_dict, load_toml, parse_value
from .data_gen import generate
from .errors import ConfigError
from .fed_train import run_experiment
from .metrics import error_stats

log = logging.getLogger("fedsilo")

SCHEMA_PATH = Path(__file__).parent / "schemas" / "summary.schema.json"


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _load(args, extra_overrides=()):
    data = load_toml(args.config)
    overrides = list(args.override or []) + list(extra_overrides)
    if args.threads is not None:
        overrides.append(f"run.threads={args.threads}")
    return from_dict(apply_overrides(data, overrides)), data


def _out_dir(args, config) -> Path:
    return Path(args.out if args.out is not None else config.out)


def write_run(out: Path, logm) -> dict:
    _write(out / "metrics.csv", logm.to_csv())
    _write(out / "partitions.jsonl", logm.partitions_jsonl())
    _write(out / "events.jsonl", logm.to_jsonl())
    summary = logm.summary()
    _write(out / "summary.json", _dump(summary))
    return summary


def aggregate_summary(scheme, summaries) -> dict:
    means = [s["mean"] for s in summaries]
    stats = error_stats(means)
    return {
        "scheme": scheme,
        "seeds": [s["seed"] for s in summaries],
        "mean": stats["mean"],
        "std": stats["std"],
        "min": stats["min"],
        "max": stats["max"],
        "std_kind": "population",
        "final_partition": [s["final_partition"] for s in summaries],
        "runs": summaries,
    }


def cmd_run(args) -> int:
    config, _ = _load(args)
    out = _out_dir(args, config)
    summaries = []
    for seed in config.seeds:
        logm = run_experiment(config, seed)
        summaries.append(write_run(out / f"seed-{seed}", logm))
        log.info("seed %s: mean error %.4f, partition %s", seed, summaries[-1]["mean"],
                 summaries[-1]["final_partition"])
    agg = aggregate_summary(config.scheme, summaries)
    _write(out / "summary.json", _dump(agg))
    # flat copies at the top level for single-run consumers
    _write(out / "metrics.csv", "".join(
        (out / f"seed-{s}" / "metrics.csv").read_text().split("\n", 1)[1] if i else
        (out / f"seed-{s}" / "metrics.csv").read_text()
        for i, s in enumerate(config.seeds)))
    _write(out / "partitions.jsonl", "".join(
        json.dumps({"seed": s, **json.loads(line)}) + "\n"
        for s in config.seeds
        for line in (out / f"seed-{s}" / "partitions.jsonl").read_text().splitlines()))
    print(f"{config.scheme}: mean error {agg['mean']:.4f} +- {agg['std']:.4f} over {len(summaries)} seed(s)")
    return 0


def parse_grid(items, n_clients) -> dict[str, list]:
    grid = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"grid entry {item!r} must look like key=v1,v2")
        key, values = item.split("=", 1)
        parsed = []
        for raw in values.split(","):
            raw = raw.strip()
            if not raw:
                continue
            v = parse_value(raw)
            if key.strip() in ("forced_k", "hcct.forced_k") and v == "N":
                v = n_clients
            if v not in parsed:
                parsed.append(v)
        if not parsed:
            raise ConfigError(f"grid entry {key!r} has no values")
        grid[key.strip()] = parsed
    if not grid:
        raise ConfigError("sweep needs a non-empty --grid")
    return grid


def _cell_name(params: dict) -> str:
    return ",".join(f"{k}={v}" for k, v in params.items()).replace("/", "_")


def cmd_sweep(args) -> int:
    base, _ = _load(args)
    grid = parse_grid(args.grid, base.scenario.n_clients)
    seeds = grid.pop("seeds", None) or grid.pop("run.seeds", None) or list(base.seeds)
    out = _out_dir(args, base)
    keys = list(grid)
    rows = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        params = dict(zip(keys, combo))
        overrides = [f"{k}={json.dumps(v) if isinstance(v, str) else v}" for k, v in params.items()]
        config, _ = _load(args, overrides)
        for seed in seeds:
            cell = out / "cells" / f"{_cell_name(params)},seed={seed}"
            summary_path = cell / "summary.json"
            if summary_path.exists():
                summary = json.loads(summary_path.read_text())
                log.info("skipping completed cell %s", cell.name)
            else:
                summary = write_run(cell, run_experiment(config, seed))
            groups = summary["final_partition"]
            rows.append({**params, "seed": seed, "mean": summary["mean"], "std": summary["std"],
                         "min": summary["min"], "max": summary["max"],
                         "n_groups": len(groups) if groups is not None else ""})
    fields = keys + ["seed", "mean", "std", "min", "max", "n_groups"]
    out.mkdir(parents=True, exist_ok=True)
    with (out / "sweep.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
    return 0


def compare_schemes(config, schemes, seeds):
    """Run every scheme on the same per-seed datasets. Returns rows and data digests."""
    results = {s: [] for s in schemes}
    digests = {}
    for seed in seeds:
        scenario = replace(config.scenario, n_extra=config.n_arrivals)
        datasets = generate(scenario, seed)
        digests[seed] = [d.digest() for d in datasets]
        for scheme in schemes:
            cfg = replace(config, scheme=scheme)
            logm = run_experiment(cfg, seed, datasets)
            assert [d.digest() for d in datasets] == digests[seed]
            results[scheme].append(logm)
    rows = []
    for scheme in schemes:
        per_seed = [m.final_stats() for m in results[scheme]]
        means = [p["mean"] for p in per_seed]
        rows.append({
            "scheme": scheme,
            "mean": float(np.mean(means)),
            "mean_sd": float(np.std(means)),
            "std": float(np.mean([p["std"] for p in per_seed])),
            "min": float(np.mean([p["min"] for p in per_seed])),
            "max": float(np.mean([p["max"] for p in per_seed])),
            "seeds": len(per_seed),
        })
    return rows, digests, results


def cmd_compare(args) -> int:
    config, _ = _load(args)
    schemes = args.schemes.split(",") if args.schemes else list(SCHEMES)
    for s in schemes:
        if s not in SCHEMES:
            raise ConfigError(f"unknown scheme {s!r}; choose from {SCHEMES}")
    out = _out_dir(args, config)
    rows, digests, results = compare_schemes(config, schemes, config.seeds)
    for scheme, logs in results.items():
        for m in logs:
            write_run(out / scheme / f"seed-{m.seed}", m)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "compare.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    _write(out / "datasets.json", _dump({str(k): v for k, v in digests.items()}))
    print(f"{'scheme':<12} {'error (%)':>16} {'std':>7} {'min':>7} {'max':>7}")
    for r in rows:
        print(f"{r['scheme']:<12} {100 * r['mean']:8.2f} +- {100 * r['mean_sd']:5.2f} "
              f"{100 * r['std']:7.2f} {100 * r['min']:7.2f} {100 * r['max']:7.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsilo", description="Cross-silo FL collaboration simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [("run", "run one scheme for every seed"),
                           ("sweep", "grid sweep over config values"),
                           ("compare", "run several schemes on shared data")]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="TOML experiment config")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="override a config value, e.g. scheme=global or train.epochs=5")
        p.add_argument("--out", help="output directory (default: run.out)")
        p.add_argument("--threads", type=int, help="parallel local-training threads")
        if name == "sweep":
            p.add_argument("--grid", action="append", metavar="KEY=V1,V2",
                           help="grid axis, e.g. alpha=1,100 or forced_k=1,2,5,10,N")
        if name == "compare":
            p.add_argument("--schemes", help="comma-separated schemes (default: all)")
    return parser


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and exit nonzero
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
