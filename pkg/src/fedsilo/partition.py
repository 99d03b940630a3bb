"""Utility-driven agglomerative client partitioning.

Clients start as singleton groups. The pair of groups whose merge raises total
client utility the most is merged, until one group is left or no merge helps.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .nn_core import ParamVector

ZERO_NORM = 1e-12
SIMILARITY_MODES = ("full_gradient", "selected_layer")


@dataclass(frozen=True)
class UtilityParams:
    alpha: float = 1.0
    beta: float = 2.0
    similarity_mode: str = "full_gradient"
    selected_layer: int | None = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if not self.beta > 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if self.similarity_mode not in SIMILARITY_MODES:
            raise ConfigError(f"similarity_mode must be one of {SIMILARITY_MODES}")
        if (self.similarity_mode == "selected_layer") != (self.selected_layer is not None):
            raise ConfigError("selected_layer is required exactly when similarity_mode is selected_layer")

    def view(self, g: ParamVector) -> np.ndarray:
        if self.similarity_mode == "selected_layer":
            return g.layer(self.selected_layer)
        return g.values


@dataclass
class MacCounter:
    """Multiply-accumulate count of similarity evaluations."""

    macs: int = 0
    evaluations: int = 0


def cosine_similarity(a: np.ndarray, b: np.ndarray, counter: MacCounter | None = None) -> float:
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if counter is not None:
        counter.macs += 3 * a.shape[0]
        counter.evaluations += 1
    na = float(np.sqrt(a @ a))
    nb = float(np.sqrt(b @ b))
    if na < ZERO_NORM or nb < ZERO_NORM:
        return 0.0
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def client_utility(g_i, g_group, group_size, up: UtilityParams, counter=None) -> float:
    """-alpha / D_group + cos(g_i, g_group) + beta."""
    return _utility_core(g_i, g_group, group_size, up, counter) + up.beta


def _utility_core(g_i, g_group, group_size, up, counter=None) -> float:
    # utility without beta; beta cancels in every benefit, so decisions use this
    if group_size < 1:
        raise ConfigError("group size must be at least 1")
    a = up.view(g_i) if isinstance(g_i, ParamVector) else g_i
    b = up.view(g_group) if isinstance(g_group, ParamVector) else g_group
    return -up.alpha / group_size + cosine_similarity(a, b, counter)


def aggregate(vectors: Sequence[np.ndarray], sizes: Sequence[float]) -> np.ndarray:
    """Size-weighted average, summed in the given order."""
    total = float(sum(sizes))
    out = np.zeros_like(vectors[0], dtype=np.float64)
    for v, d in zip(vectors, sizes):
        out += (d / total) * v
    return out


@dataclass
class _Group:
    members: tuple[int, ...]
    size: int
    gradient: np.ndarray
    core_utility: float  # sum over members, beta excluded


@dataclass
class Merge:
    first: tuple[int, ...]
    second: tuple[int, ...]
    benefit: float
    total_utility: float  # after the merge, beta included


@dataclass
class Partition:
    groups: list[tuple[int, ...]]
    group_gradient: list[np.ndarray] = field(default_factory=list)
    group_size: list[int] = field(default_factory=list)
    merges: list[Merge] = field(default_factory=list)
    initial_utility: float = 0.0
    sim_macs: int = 0
    sim_evals: int = 0

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def group_of(self, client: int) -> int:
        for k, members in enumerate(self.groups):
            if client in members:
                return k
        raise KeyError(client)

    def as_sets(self) -> set[frozenset[int]]:
        return {frozenset(g) for g in self.groups}

    def to_json(self, epoch: int) -> str:
        return json.dumps({"groups": [list(g) for g in self.groups], "epoch": epoch})

    @staticmethod
    def from_json(text: str) -> tuple["Partition", int]:
        data = json.loads(text)
        return Partition([tuple(g) for g in data["groups"]]), data["epoch"]


def validate_partition(groups, n_clients) -> None:
    seen: set[int] = set()
    for g in groups:
        if not g:
            raise ValueError("empty group")
        if seen & set(g):
            raise ValueError("groups overlap")
        seen |= set(g)
    if seen != set(range(n_clients)):
        raise ValueError("groups do not cover all clients")


class BenefitCache:
    """Benefit memo keyed by (group id, group id) with invalidation on merge."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._values: dict[tuple[int, int], float] = {}

    def get(self, k1: int, k2: int):
        if not self.enabled:
            return None
        return self._values.get((k1, k2))

    def put(self, k1: int, k2: int, value: float):
        if self.enabled:
            self._values[(k1, k2)] = value

    def invalidate(self, *ids: int):
        ids_set = set(ids)
        self._values = {
            key: v for key, v in self._values.items() if not (ids_set & set(key))
        }

    def __contains__(self, key) -> bool:
        return key in self._values


class _Engine:
    def __init__(self, gradients, sizes, up, counter):
        self.grads = [up.view(g) if isinstance(g, ParamVector) else np.asarray(g) for g in gradients]
        self.sizes = [int(d) for d in sizes]
        self.up = up
        self.counter = counter

    def group(self, members: tuple[int, ...]) -> _Group:
        members = tuple(sorted(members))
        size = sum(self.sizes[i] for i in members)
        if len(members) == 1:
            grad = self.grads[members[0]]
        else:
            grad = aggregate([self.grads[i] for i in members], [self.sizes[i] for i in members])
        core = sum(_utility_core(self.grads[i], grad, size, self.up, self.counter) for i in members)
        return _Group(members, size, grad, core)

    def benefit(self, a: _Group, b: _Group) -> tuple[float, _Group]:
        merged = self.group(a.members + b.members)
        return merged.core_utility - a.core_utility - b.core_utility, merged


def merge_benefit(k1, k2, partition: Partition, gradients, sizes, up: UtilityParams) -> float:
    """Total-utility change if groups ``k1`` and ``k2`` of ``partition`` merged.

    Group indices refer to positions in ``partition.groups``; the partition is
    not modified.
    """
    if k1 == k2:
        raise ValueError("cannot merge a group with itself")
    try:
        a, b = partition.groups[k1], partition.groups[k2]
    except IndexError as exc:
        raise ValueError(f"unknown group id in ({k1}, {k2})") from exc
    engine = _Engine(gradients, sizes, up, None)
    value, _ = engine.benefit(engine.group(a), engine.group(b))
    return value


def total_utility(groups, gradients, sizes, up: UtilityParams) -> float:
    engine = _Engine(gradients, sizes, up, None)
    return sum(engine.group(tuple(g)).core_utility + up.beta * len(g) for g in groups)


def client_utilities(groups, gradients, sizes, up: UtilityParams) -> dict[int, float]:
    engine = _Engine(gradients, sizes, up, None)
    out = {}
    for members in groups:
        grp = engine.group(tuple(members))
        for i in grp.members:
            out[i] = client_utility(engine.grads[i], grp.gradient, grp.size, up)
    return out


def client_partition(
    gradients: Sequence,
    sizes: Sequence[int],
    up: UtilityParams,
    *,
    target_groups: int | None = None,
    use_cache: bool = True,
) -> Partition:
    """Greedy agglomerative partition maximizing total client utility.

    With ``target_groups`` set, merging ignores the benefit sign and continues
    until exactly that many groups remain.
    """
    n = len(gradients)
    if n != len(sizes):
        raise ConfigError("gradients and sizes differ in length")
    if n == 0:
        raise ConfigError("no clients to partition")
    if target_groups is not None and not 1 <= target_groups <= n:
        raise ConfigError(f"target_groups must be in [1, {n}]")
    counter = MacCounter()
    engine = _Engine(gradients, sizes, up, counter)
    # group id = smallest member index; stable across merges
    groups = {i: engine.group((i,)) for i in range(n)}
    cache = BenefitCache(enabled=use_cache)
    merged_cache: dict[tuple[int, int], _Group] = {}
    total = sum(g.core_utility for g in groups.values()) + up.beta * n
    result = Partition(groups=[], initial_utility=total)
    stop_at = 1 if target_groups is None else target_groups

    while len(groups) > stop_at:
        best = None
        ids = sorted(groups)
        for x, k1 in enumerate(ids):
            for k2 in ids[x + 1 :]:
                value = cache.get(k1, k2)
                if value is None:
                    value, merged = engine.benefit(groups[k1], groups[k2])
                    cache.put(k1, k2, value)
                    merged_cache[(k1, k2)] = merged
                # strict > keeps the lexicographically smallest pair on ties
                if best is None or value > best[0]:
                    best = (value, k1, k2)
        value, k1, k2 = best
        if target_groups is None and value <= 0:
            break
        merged = merged_cache.get((k1, k2)) if use_cache else None
        if merged is None:
            _, merged = engine.benefit(groups[k1], groups[k2])
        first, second = groups.pop(k1).members, groups.pop(k2).members
        cache.invalidate(k1, k2)
        merged_cache = {key: m for key, m in merged_cache.items() if k1 not in key and k2 not in key}
        groups[k1] = merged
        total += value
        result.merges.append(Merge(first, second, value, total))

    final = [groups[k] for k in sorted(groups)]
    result.groups = [g.members for g in final]
    result.group_gradient = [g.gradient for g in final]
    result.group_size = [g.size for g in final]
    result.sim_macs = counter.macs
    result.sim_evals = counter.evaluations
    return result


def select_similarity_layer(gradients: Sequence[ParamVector]) -> int:
    """Index of the span with the largest relative across-client variance."""
    if len(gradients) < 2:
        raise ConfigError("layer selection needs at least two clients")
    spans = gradients[0].layer_spans
    if any(g.layer_spans != spans for g in gradients):
        raise ConfigError("gradients do not share a layer structure")
    best, best_score = 0, -np.inf
    for index in range(len(spans)):
        stack = np.stack([g.layer(index) for g in gradients])
        variance = stack.var(axis=0).mean()
        mean = stack.mean(axis=0).mean()
        score = variance / (abs(mean) + ZERO_NORM)
        if score > best_score:
            best, best_score = index, score
    return best
