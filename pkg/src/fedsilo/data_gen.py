"""Synthetic client datasets and CSV ingestion.

Every synthetic source is a set of class-conditional unit-covariance Gaussians
in ``feature_dim`` dimensions. Clients that share a source share the exact
same class means.
"""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError

KINDS = ("clustered_sources", "iid_halfnormal", "label_shards", "motivating", "csv")


@dataclass(frozen=True, eq=False)
class ClientDataset:
    train: tuple[np.ndarray, np.ndarray]
    test: tuple[np.ndarray, np.ndarray]
    source_id: int = 0

    def __post_init__(self):
        (xtr, ytr), (xte, yte) = self.train, self.test
        if len(ytr) < 1 or len(yte) < 1:
            raise ConfigError("client train and test sets must be non-empty")
        if xtr.shape[1] != xte.shape[1]:
            raise ConfigError("train and test feature dimensions differ")

    @property
    def size(self) -> int:
        return len(self.train[1])

    def labels(self) -> set[int]:
        return set(np.unique(self.train[1]).tolist()) | set(np.unique(self.test[1]).tolist())

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (*self.train, *self.test):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "clustered_sources"
    n_clients: int = 10
    classes: int = 10
    feature_dim: int = 20
    split: float = 0.8
    # clustered_sources
    n_sources: int = 5
    samples_per_client: int = 185
    source_separation: float = 3.0
    class_scale: float = 1.0
    disjoint_labels: bool = False
    # iid_halfnormal
    base_size: int = 120
    min_size: int = 10
    unit_sizes: bool = False
    test_size: int | None = None
    # label_shards
    n_shards: int = 100
    shard_size: int = 95
    # motivating
    per_class: int = 100
    # csv
    paths: tuple[str, ...] = field(default_factory=tuple)
    # extra clients generated after the first n_clients, admitted mid-run
    n_extra: int = 0

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ConfigError("; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if self.kind not in KINDS:
            out.append(f"scenario.kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind != "motivating" and self.n_clients < 2:
            out.append("scenario.n_clients must be >= 2")
        if not 0 < self.split < 1:
            out.append("scenario.split must lie in (0, 1)")
        if self.classes < 2:
            out.append("scenario.classes must be >= 2")
        if self.feature_dim < 1:
            out.append("scenario.feature_dim must be >= 1")
        if self.n_extra < 0:
            out.append("scenario.n_extra must be >= 0")
        if self.kind == "motivating" and (self.classes != 10 or self.n_extra):
            out.append("the motivating scenario is fixed at 3 clients and 10 classes")
        if self.kind == "csv" and len(self.paths) != self.total_clients:
            out.append("scenario.paths needs one CSV file per client")
        return out

    @property
    def total_clients(self) -> int:
        if self.kind == "motivating":
            return 3
        return self.n_clients + self.n_extra


def _split(x, y, ratio, rng, test_size=None):
    n = len(y)
    order = rng.permutation(n)
    if test_size is None:
        n_train = min(max(1, round(ratio * n)), n - 1)
    else:
        n_train = n - test_size
    if n_train < 1 or n_train >= n:
        raise ConfigError(f"cannot split {n} samples into non-empty train and test sets")
    tr, te = order[:n_train], order[n_train:]
    return (x[tr], y[tr]), (x[te], y[te])


def _sample(means, labels, rng):
    return means[labels] + rng.normal(size=(len(labels), means.shape[1]))


def _balanced_labels(n, classes, rng):
    labels = np.arange(n) % len(classes)
    return np.asarray(classes)[rng.permutation(labels)]


def source_means(spec: ScenarioSpec, seed) -> np.ndarray:
    """Class means of shape (n_sources, classes, feature_dim).

    Sources are redrawn until every class mean is at least
    ``source_separation`` away from the same class in every other source.
    """
    rng = np.random.default_rng([seed, 101])
    for _ in range(1000):
        means = rng.normal(0, spec.class_scale, size=(spec.n_sources, spec.classes, spec.feature_dim))
        diff = means[:, None] - means[None, :]
        dist = np.sqrt((diff**2).sum(-1))
        off_diag = ~np.eye(spec.n_sources, dtype=bool)
        if spec.n_sources == 1 or dist[off_diag].min() >= spec.source_separation:
            return means
    raise ConfigError(
        "could not draw sources with the requested separation; "
        "raise class_scale or feature_dim, or lower source_separation"
    )


def source_classes(spec: ScenarioSpec, source: int) -> list[int]:
    if spec.disjoint_labels:
        return [c for c in range(spec.classes) if c % spec.n_sources == source]
    return list(range(spec.classes))


def gen_clustered_sources(spec: ScenarioSpec, seed) -> list[ClientDataset]:
    if spec.n_sources > spec.n_clients:
        raise ConfigError(f"n_sources ({spec.n_sources}) exceeds n_clients ({spec.n_clients})")
    if spec.disjoint_labels and spec.n_sources > spec.classes:
        raise ConfigError("disjoint_labels needs n_sources <= classes")
    means = source_means(spec, seed)
    out = []
    for i in range(spec.total_clients):
        rng = np.random.default_rng([seed, 202, i])
        s = i % spec.n_sources
        y = _balanced_labels(spec.samples_per_client, source_classes(spec, s), rng)
        x = _sample(means[s], y, rng)
        train, test = _split(x, y, spec.split, rng, spec.test_size)
        out.append(ClientDataset(train, test, source_id=s))
    return out


def halfnormal_sizes(spec: ScenarioSpec, seed) -> list[int]:
    rng = np.random.default_rng([seed, 303])
    z = np.abs(rng.normal(size=spec.total_clients))
    if spec.unit_sizes:
        z = np.ones_like(z)
    return [max(spec.min_size, round(spec.base_size * float(v))) for v in z]


def gen_iid_halfnormal(spec: ScenarioSpec, seed) -> list[ClientDataset]:
    means = np.random.default_rng([seed, 101]).normal(
        0, spec.class_scale, size=(spec.classes, spec.feature_dim)
    )
    out = []
    for i, d in enumerate(halfnormal_sizes(spec, seed)):
        rng = np.random.default_rng([seed, 202, i])
        n_test = spec.test_size or max(1, round(d * (1 - spec.split) / spec.split))
        y = rng.integers(0, spec.classes, d + n_test)
        x = _sample(means, y, rng)
        train = (x[:d], y[:d])
        test = (x[d:], y[d:])
        out.append(ClientDataset(train, test, source_id=0))
    return out


def shard_counts(n_clients, n_shards, rng) -> list[int]:
    """Half-normal shard demand, apportioned so every shard has exactly one owner."""
    z = np.abs(rng.normal(size=n_clients)) + 1e-9
    spare = n_shards - n_clients
    raw = spare * z / z.sum()
    counts = np.floor(raw).astype(int)
    remainder = spare - counts.sum()
    for i in np.argsort(-(raw - counts), kind="stable")[:remainder]:
        counts[i] += 1
    return [int(c) + 1 for c in counts]


def gen_label_shards(spec: ScenarioSpec, seed) -> list[ClientDataset]:
    if spec.n_shards % spec.classes:
        raise ConfigError("n_shards must be divisible by classes")
    if spec.total_clients > spec.n_shards:
        raise ConfigError(f"more clients ({spec.total_clients}) than shards ({spec.n_shards})")
    rng = np.random.default_rng([seed, 404])
    means = rng.normal(0, spec.class_scale, size=(spec.classes, spec.feature_dim))
    shard_class = np.repeat(np.arange(spec.classes), spec.n_shards // spec.classes)
    shard_order = rng.permutation(spec.n_shards)
    counts = shard_counts(spec.total_clients, spec.n_shards, rng)
    out = []
    pos = 0
    for i, c in enumerate(counts):
        owned = shard_order[pos : pos + c]
        pos += c
        crng = np.random.default_rng([seed, 202, i])
        y = np.repeat(shard_class[owned], spec.shard_size)
        x = _sample(means, y, crng)
        train, test = _split(x, y, spec.split, crng, spec.test_size)
        out.append(ClientDataset(train, test, source_id=i))
    return out


def shard_assignment(spec: ScenarioSpec, seed) -> list[list[int]]:
    """Shard ids owned by each client, replaying gen_label_shards' draws."""
    rng = np.random.default_rng([seed, 404])
    rng.normal(0, spec.class_scale, size=(spec.classes, spec.feature_dim))
    order = rng.permutation(spec.n_shards)
    counts = shard_counts(spec.total_clients, spec.n_shards, rng)
    starts = np.cumsum([0] + counts)
    return [order[a:b].tolist() for a, b in zip(starts, starts[1:])]


def gen_motivating_example(seed, per_class: int = 100, feature_dim: int = 20,
                           split: float = 0.8, class_scale: float = 1.0) -> list[ClientDataset]:
    """Three clients: 20% and 80% of classes 0-4, and all of classes 5-9."""
    rng = np.random.default_rng([seed, 505])
    means = rng.normal(0, class_scale, size=(10, feature_dim))
    y = np.repeat(np.arange(10), per_class)
    x = _sample(means, y, rng)
    low = np.flatnonzero(y < 5)
    low = low[rng.permutation(len(low))]
    cut = round(0.2 * len(low))
    parts = [low[:cut], low[cut:], np.flatnonzero(y >= 5)]
    out = []
    for i, idx in enumerate(parts):
        crng = np.random.default_rng([seed, 202, i])
        train, test = _split(x[idx], y[idx], split, crng)
        out.append(ClientDataset(train, test, source_id=0 if i < 2 else 1))
    return out


def load_csv(spec: ScenarioSpec, seed) -> list[ClientDataset]:
    """One CSV per client: a header, feature columns, then an integer label."""
    out = []
    for i, path in enumerate(spec.paths):
        x, y = _read_client_csv(Path(path), spec.classes)
        rng = np.random.default_rng([seed, 606, i])
        train, test = _split(x, y, spec.split, rng)
        out.append(ClientDataset(train, test, source_id=i))
    dims = {d.train[0].shape[1] for d in out}
    if len(dims) > 1:
        raise ConfigError(f"client CSV files disagree on feature count: {sorted(dims)}")
    return out


def _read_client_csv(path: Path, classes: int):
    if not path.exists():
        raise ConfigError(f"CSV file not found: {path}")
    rows, labels = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise ParseError(path, 1, "missing header row")
        width = len(header)
        if width < 2:
            raise ParseError(path, 1, "need at least one feature column and a label column")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != width:
                raise ParseError(path, line, f"expected {width} columns, found {len(row)}")
            try:
                feats = [float(v) for v in row[:-1]]
            except ValueError as exc:
                raise ParseError(path, line, f"non-numeric feature: {exc}") from None
            try:
                label = int(row[-1].strip())
            except ValueError:
                raise ParseError(path, line, f"label {row[-1]!r} is not an integer") from None
            if not 0 <= label < classes:
                raise ParseError(path, line, f"label {label} outside [0, {classes})")
            if not all(math.isfinite(v) for v in feats):
                raise ParseError(path, line, "non-finite feature value")
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise ConfigError(f"{path}: no data rows after header")
    if len(rows) < 2:
        raise ConfigError(f"{path}: need at least two rows to form train and test sets")
    return np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64)


def generate(spec: ScenarioSpec, seed) -> list[ClientDataset]:
    if spec.kind == "clustered_sources":
        return gen_clustered_sources(spec, seed)
    if spec.kind == "iid_halfnormal":
        return gen_iid_halfnormal(spec, seed)
    if spec.kind == "label_shards":
        return gen_label_shards(spec, seed)
    if spec.kind == "motivating":
        return gen_motivating_example(seed, spec.per_class, spec.feature_dim, spec.split,
                                      spec.class_scale)
    return load_csv(spec, seed)
