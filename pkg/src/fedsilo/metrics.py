"""Evaluation quantities and the per-epoch metrics log."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .nn_core import MlpArch, ParamVector, full_gradient, predict


def test_error(model: ParamVector, arch: MlpArch, test_set) -> float:
    """Fraction of misclassified samples; ties in the argmax go to the lowest class."""
    x, y = test_set
    if len(y) == 0:
        raise ConfigError("test set is empty")
    return float(np.mean(predict(model, arch, x) != y))


test_error.__test__ = False  # keep pytest from collecting it


def error_stats(errors) -> dict:
    """Population statistics (divide by N) over clients."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ConfigError("no errors to summarize")
    return {"mean": float(e.mean()), "std": float(e.std()), "min": float(e.min()),
            "max": float(e.max())}


def grad_norm_sum(models, datasets, arch: MlpArch) -> float:
    """Sum over clients of the squared norm of the full-batch local gradient."""
    total = 0.0
    for model, data in zip(models, datasets):
        g = full_gradient(model, arch, data.train).values
        total += float(g @ g)
    return total


def kappa_estimate(datasets, arch: MlpArch, probe: ParamVector) -> np.ndarray:
    """Pairwise ||grad J_i(w) - grad J_j(w)|| at a shared probe model."""
    grads = [full_gradient(probe, arch, d.train).values for d in datasets]
    n = len(grads)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = float(np.linalg.norm(grads[i] - grads[j]))
    return out


def mean_kappa_by_label(kappa: np.ndarray, labels) -> tuple[float, float]:
    """Mean off-diagonal kappa within equal labels and across different labels."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    within = kappa[same & off]
    across = kappa[~same]
    return (float(within.mean()) if within.size else float("nan"),
            float(across.mean()) if across.size else float("nan"))


@dataclass
class EpochRecord:
    epoch: int
    clients: list[int]
    test_error: list[float]
    train_loss: list[float]
    groups: list[list[int]] | None = None
    utility: list[float | None] = field(default_factory=list)
    grad_norm_sum: float = 0.0
    kappa: list[list[float]] | None = None
    sim_macs: int | None = None
    sim_evals: int | None = None


@dataclass
class MetricsLog:
    scheme: str
    seed: int
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]

    def final_stats(self, clients=None) -> dict:
        rec = self.final
        errors = rec.test_error
        if clients is not None:
            keep = set(clients)
            errors = [e for c, e in zip(rec.clients, errors) if c in keep]
        return error_stats(errors)

    def final_partition(self) -> list[list[int]] | None:
        for rec in reversed(self.records):
            if rec.groups is not None:
                return rec.groups
        return None

    def events(self):
        for rec in self.records:
            yield {
                "epoch": rec.epoch,
                "partition": rec.groups,
                "clients": rec.clients,
                "test_error": rec.test_error,
                "train_loss": rec.train_loss,
                "utility": rec.utility,
                "grad_norm_sum": rec.grad_norm_sum,
            }

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e) + "\n" for e in self.events())

    def partitions_jsonl(self) -> str:
        return "".join(
            json.dumps({"groups": r.groups, "epoch": r.epoch}) + "\n"
            for r in self.records if r.groups is not None
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["scheme", "seed", "epoch", "client", "group", "test_error",
                         "train_loss", "utility", "grad_norm_sum"])
        for rec in self.records:
            group_of = {}
            for k, members in enumerate(rec.groups or []):
                for c in members:
                    group_of[c] = k
            for i, c in enumerate(rec.clients):
                u = rec.utility[i] if rec.utility else None
                writer.writerow([self.scheme, self.seed, rec.epoch, c, group_of.get(c, ""),
                                 repr(rec.test_error[i]), repr(rec.train_loss[i]),
                                 "" if u is None else repr(u), repr(rec.grad_norm_sum)])
        return buf.getvalue()

    def summary(self) -> dict:
        stats = self.final_stats()
        return {"scheme": self.scheme, "seed": self.seed, **stats,
                "std_kind": "population", "epochs": self.final.epoch,
                "final_partition": self.final_partition()}

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "seed": self.seed,
                "records": [asdict(r) for r in self.records]}
