"""Grouped federated training: HCCT and its variants plus baseline schemes.

Every scheme is one ``run_epoch_*`` function that advances all client states
by one global epoch. ``Federation`` wires data, initialization, arrivals and
evaluation around them.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ExperimentConfig
from .data_gen import ClientDataset, generate
from .errors import ConfigError
from .metrics import EpochRecord, MetricsLog, grad_norm_sum, kappa_estimate, test_error
from .nn_core import (
    MlpArch,
    ParamVector,
    dataset_loss,
    init_params,
    local_train,
    steps_for_epochs,
)
from .partition import (
    Partition,
    UtilityParams,
    client_partition,
    client_utilities,
    merge_benefit,
    select_similarity_layer,
)

ACC_CLAMP = (1e-3, 1 - 1e-3)


@dataclass
class ClientState:
    id: int
    dataset: ClientDataset
    model: ParamVector
    rng: np.random.Generator
    last_gradient: ParamVector | None = None
    shadow_model: ParamVector | None = None
    shadow_rng: np.random.Generator | None = None
    pending: bool = False  # arrived, not yet placed in a group

    @property
    def size(self) -> int:
        return self.dataset.size


@dataclass
class RunContext:
    config: ExperimentConfig
    arch: MlpArch
    w0: ParamVector
    seed: int
    global_model: ParamVector | None = None
    cluster_models: list[ParamVector] | None = None
    selected_layer: int | None = None
    broadcasts: list[tuple[int, int]] = field(default_factory=list)  # (epoch, payload length)

    def lr(self, t: int) -> float:
        return self.config.lr_at(t)

    def steps(self, state: ClientState) -> int:
        if self.config.local_steps is not None:
            return self.config.local_steps
        return steps_for_epochs(self.config.local_epochs, state.size, self.config.batch_size)

    def shared_mask(self) -> np.ndarray:
        """True on coordinates that are shared; the classifier stays local."""
        mask = np.ones(self.arch.n_params, dtype=bool)
        for idx in self.arch.classifier_spans():
            span = self.w0.layer_spans[idx]
            mask[span.offset : span.stop] = False
        return mask

    def shared_spans(self) -> list[int]:
        local = set(self.arch.classifier_spans())
        return [i for i in range(len(self.w0.layer_spans)) if i not in local]


def client_rng(seed: int, client_id: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, 7, client_id, stream])


def weighted_sum(vectors, weights) -> np.ndarray:
    """Fixed-order reduction: sum of weight_i * vector_i in list order."""
    out = np.zeros_like(vectors[0], dtype=np.float64)
    for v, w in zip(vectors, weights):
        out += w * v
    return out


def size_weights(sizes) -> list[float]:
    total = float(sum(sizes))
    return [d / total for d in sizes]


def group_start_model(members: list[ClientState]) -> np.ndarray:
    """Size-weighted average of member models (the per-group model before training).

    When every member already holds the same model it is returned unchanged,
    which keeps repeated averaging bitwise stable.
    """
    first = members[0].model.values
    if all(np.array_equal(first, m.model.values) for m in members[1:]):
        return first.copy()
    return weighted_sum([m.model.values for m in members], size_weights([m.size for m in members]))


def _train_jobs(jobs, t, ctx):
    """Run local training for (state, start_values, rng) jobs, order preserved."""

    def one(job):
        state, start, rng = job
        return local_train(ctx.w0.with_values(start), ctx.arch, state.dataset.train,
                           ctx.steps(state), ctx.config.batch_size, ctx.lr(t), rng)

    if ctx.config.threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(ctx.config.threads) as pool:
            return list(pool.map(one, jobs))
    return [one(j) for j in jobs]


def train_groups(states, groups, t, ctx, mask=None):
    """One epoch of grouped training over a given partition of state positions.

    Singletons train on their own model. Larger groups start from the
    size-weighted group model and apply the size-weighted mean update. With a
    ``mask`` only masked coordinates are shared; the rest follow each
    member's own local update.
    """
    jobs, plan = [], []
    for members in groups:
        group = [states[i] for i in members]
        if len(group) == 1:
            s = group[0]
            jobs.append((s, s.model.values, s.rng))
            plan.append((members, None))
            continue
        if mask is None:
            start = group_start_model(group)
            ctx.broadcasts.append((t, start.shape[0]))
            starts = [start] * len(group)
        else:
            shared = weighted_sum([m.model.values[mask] for m in group],
                                  size_weights([m.size for m in group]))
            if all(np.array_equal(group[0].model.values[mask], m.model.values[mask]) for m in group):
                shared = group[0].model.values[mask].copy()
            ctx.broadcasts.append((t, shared.shape[0]))
            starts = []
            for m in group:
                v = m.model.values.copy()
                v[mask] = shared
                starts.append(v)
            start = starts[0]
        for s, v in zip(group, starts):
            jobs.append((s, v, s.rng))
        plan.append((members, (start, starts)))

    results = iter(_train_jobs(jobs, t, ctx))
    lr = ctx.lr(t)
    for members, info in plan:
        if info is None:
            s = states[members[0]]
            new, g = next(results)
            s.model, s.last_gradient = new, g
            continue
        start, starts = info
        group = [states[i] for i in members]
        outs = [next(results) for _ in group]
        weights = size_weights([m.size for m in group])
        g_hat = weighted_sum([g.values for _, g in outs], weights)
        if mask is None:
            new_model = start - lr * g_hat
            for s, (_, g) in zip(group, outs):
                s.model = ctx.w0.with_values(new_model.copy())
                s.last_gradient = g
        else:
            shared_new = start[mask] - lr * g_hat[mask]
            for s, (local_new, g) in zip(group, outs):
                v = local_new.values.copy()
                v[mask] = shared_new
                s.model = ctx.w0.with_values(v)
                s.last_gradient = g


def _gradient_view(ctx, variant):
    if variant == "hcct_p":
        spans = ctx.shared_spans()
        return lambda g: g.subset(spans)
    return lambda g: g


def _utility_params(ctx, variant) -> UtilityParams:
    if variant == "hcct_e" and ctx.selected_layer is not None:
        return UtilityParams(ctx.config.alpha, ctx.config.beta, "selected_layer", ctx.selected_layer)
    return UtilityParams(ctx.config.alpha, ctx.config.beta)


def hcct_groups(states, t, ctx, variant="hcct") -> tuple[list[list[int]], Partition | None]:
    """Partition for epoch t from the updates uploaded at epoch t-1."""
    active = [i for i, s in enumerate(states) if not s.pending and s.last_gradient is not None]
    forced = ctx.config.forced_k
    if t == 0 or not active:
        if forced == 1:
            return [list(range(len(states)))], None
        return [[i] for i in range(len(states))], None
    view = _gradient_view(ctx, variant)
    grads = [view(states[i].last_gradient) for i in active]
    if variant == "hcct_e" and ctx.selected_layer is None and len(grads) >= 2:
        ctx.selected_layer = select_similarity_layer(grads)
    up = _utility_params(ctx, variant)
    target = None if forced is None else min(forced, len(active))
    part = client_partition(grads, [states[i].size for i in active], up, target_groups=target)
    groups = [[active[j] for j in g] for g in part.groups]
    newcomers = [i for i, s in enumerate(states) if s.pending or s.last_gradient is None]
    admit_newcomers(states, groups, newcomers, t, ctx, variant)
    return groups, part


def admit_newcomers(states, groups, newcomers, t, ctx, variant="hcct"):
    """Place each arriving client in the group with the best positive merge benefit.

    The newcomer first trains briefly from the lowest-loss existing group model
    to obtain an update for the utility evaluation; if no group yields a
    positive benefit it stays a singleton on its own initial model.
    """
    view = _gradient_view(ctx, variant)
    up = _utility_params(ctx, variant)
    mask = ctx.shared_mask() if variant == "hcct_p" else None
    for idx in newcomers:
        s = states[idx]
        candidates = [group_start_model([states[i] for i in g]) for g in groups]
        losses = [dataset_loss(ctx.w0.with_values(c), ctx.arch, s.dataset.train) for c in candidates]
        best = int(np.argmin(losses))
        _, probe = local_train(ctx.w0.with_values(candidates[best]), ctx.arch, s.dataset.train,
                               ctx.steps(s), ctx.config.batch_size, ctx.lr(t), s.rng)
        s.last_gradient = probe
        s.pending = False
        order = sorted(i for g in groups for i in g) + [idx]
        pos = {c: j for j, c in enumerate(order)}
        grads = [view(states[c].last_gradient) for c in order]
        sizes = [states[c].size for c in order]
        part = Partition([tuple(pos[c] for c in g) for g in groups] + [(pos[idx],)])
        benefits = [merge_benefit(k, len(groups), part, grads, sizes, up) for k in range(len(groups))]
        k = int(np.argmax(benefits)) if benefits else -1
        if k >= 0 and benefits[k] > 0:
            joined = candidates[k]
            if mask is not None:
                joined = np.where(mask, joined, s.model.values)
            s.model = ctx.w0.with_values(joined)
            groups[k].append(idx)
            groups[k].sort()
        else:
            groups.append([idx])
    groups.sort(key=min)


def _to_partition(states, groups, part: Partition | None) -> Partition:
    out = Partition([tuple(sorted(states[i].id for i in g)) for g in groups])
    if part is not None:
        out.sim_macs = part.sim_macs
        out.sim_evals = part.sim_evals
        out.merges = part.merges
    return out


def run_epoch_hcct(states, t, ctx, variant="hcct"):
    groups, part = hcct_groups(states, t, ctx, variant)
    mask = ctx.shared_mask() if variant == "hcct_p" else None
    train_groups(states, groups, t, ctx, mask)
    return states, _to_partition(states, groups, part)


def run_epoch_hcct_e(states, t, ctx):
    return run_epoch_hcct(states, t, ctx, "hcct_e")


def run_epoch_hcct_p(states, t, ctx):
    if ctx.arch.n_layers < 2:
        raise ConfigError("hcct_p needs a hidden layer so there is something to share")
    return run_epoch_hcct(states, t, ctx, "hcct_p")


def run_epoch_independent(states, t, ctx):
    groups = [[i] for i in range(len(states))]
    train_groups(states, groups, t, ctx)
    return states, _to_partition(states, groups, None)


def run_epoch_global(states, t, ctx):
    groups = [list(range(len(states)))]
    train_groups(states, groups, t, ctx)
    return states, _to_partition(states, groups, None)


def run_epoch_maxfl(states, t, ctx):
    """Clients join the global model only when it beats their solo shadow model."""
    glob = ctx.global_model
    arch = ctx.arch
    joiners = [
        i for i, s in enumerate(states)
        if dataset_loss(glob, arch, s.dataset.train) <= dataset_loss(s.shadow_model, arch, s.dataset.train)
    ]
    shadow = _train_jobs([(s, s.shadow_model.values, s.shadow_rng) for s in states], t, ctx)
    for s, (new, _) in zip(states, shadow):
        s.shadow_model = new
    jobs = [(s, glob.values if i in joiners else s.model.values, s.rng) for i, s in enumerate(states)]
    outs = _train_jobs(jobs, t, ctx)
    if joiners:
        ctx.broadcasts.append((t, len(glob)))
        weights = size_weights([states[i].size for i in joiners])
        g_hat = weighted_sum([outs[i][1].values for i in joiners], weights)
        glob = glob.with_values(glob.values - ctx.lr(t) * g_hat)
        ctx.global_model = glob
    for i, (s, (new, g)) in enumerate(zip(states, outs)):
        s.last_gradient = g
        s.model = glob.with_values(glob.values.copy()) if i in joiners else new
    groups = ([joiners] if joiners else []) + [[i] for i in range(len(states)) if i not in joiners]
    groups.sort(key=min)
    return states, _to_partition(states, groups, None)


def fedfa_weights(accuracies) -> np.ndarray:
    acc = np.clip(np.asarray(accuracies, dtype=np.float64), *ACC_CLAMP)
    raw = -np.log2(acc)
    return raw / raw.sum()


def run_epoch_fedfa(states, t, ctx):
    """Global training with updates weighted by -log2 of local training accuracy."""
    glob = ctx.global_model
    ctx.broadcasts.append((t, len(glob)))
    outs = _train_jobs([(s, glob.values, s.rng) for s in states], t, ctx)
    acc = [1.0 - test_error(new, ctx.arch, s.dataset.train) for s, (new, _) in zip(states, outs)]
    weights = fedfa_weights(acc)
    g_hat = weighted_sum([g.values for _, g in outs], weights)
    glob = glob.with_values(glob.values - ctx.lr(t) * g_hat)
    ctx.global_model = glob
    for s, (_, g) in zip(states, outs):
        s.last_gradient = g
        s.model = glob.with_values(glob.values.copy())
    groups = [list(range(len(states)))]
    return states, _to_partition(states, groups, None)


def _cluster_losses(state, ctx):
    return [dataset_loss(m, ctx.arch, state.dataset.train) for m in ctx.cluster_models]


def _update_clusters(states, received, outs, t, ctx):
    """Apply size-weighted mean updates per cluster; clusters without members keep their model."""
    lr = ctx.lr(t)
    new_models = list(ctx.cluster_models)
    for k, members in enumerate(received):
        if not members:
            continue
        weights = size_weights([states[i].size for i in members])
        g_hat = weighted_sum([outs[i][1].values for i in members], weights)
        new_models[k] = ctx.cluster_models[k].with_values(ctx.cluster_models[k].values - lr * g_hat)
    ctx.cluster_models = new_models


def run_epoch_ifca(states, t, ctx):
    """Each client trains the cluster model with the lowest loss on its data."""
    assignment = [int(np.argmin(_cluster_losses(s, ctx))) for s in states]
    jobs = [(s, ctx.cluster_models[k].values, s.rng) for s, k in zip(states, assignment)]
    outs = _train_jobs(jobs, t, ctx)
    received = [[i for i, a in enumerate(assignment) if a == k] for k in range(len(ctx.cluster_models))]
    _update_clusters(states, received, outs, t, ctx)
    for s, k, (_, g) in zip(states, assignment, outs):
        s.last_gradient = g
        s.model = ctx.cluster_models[k].with_values(ctx.cluster_models[k].values.copy())
    groups = [g for g in received if g]
    return states, _to_partition(states, groups, None), assignment


def run_epoch_flsc(states, t, ctx):
    """Soft clustering: each client averages and updates its N_g best cluster models."""
    n_soft = ctx.config.soft_groups
    choices, best = [], []
    jobs = []
    for s in states:
        ranked = np.argsort(_cluster_losses(s, ctx), kind="stable")[:n_soft].tolist()
        best.append(ranked[0])
        chosen = sorted(ranked)
        choices.append(chosen)
        jobs.append((s, _uniform_average([ctx.cluster_models[k].values for k in chosen]), s.rng))
    outs = _train_jobs(jobs, t, ctx)
    received = [[i for i, c in enumerate(choices) if k in c] for k in range(len(ctx.cluster_models))]
    _update_clusters(states, received, outs, t, ctx)
    for s, chosen, (_, g) in zip(states, choices, outs):
        s.last_gradient = g
        s.model = ctx.w0.with_values(_uniform_average([ctx.cluster_models[k].values for k in chosen]))
    # report each client under its best cluster
    primary = [[i for i, b in enumerate(best) if b == k] for k in range(len(ctx.cluster_models))]
    groups = [g for g in primary if g]
    return states, _to_partition(states, groups, None), choices


def _uniform_average(vectors):
    if len(vectors) == 1:
        return vectors[0].copy()
    return weighted_sum(vectors, [1.0 / len(vectors)] * len(vectors))


EPOCH_FUNCS = {
    "hcct": run_epoch_hcct,
    "hcct_e": run_epoch_hcct_e,
    "hcct_p": run_epoch_hcct_p,
    "independent": run_epoch_independent,
    "global": run_epoch_global,
    "maxfl": run_epoch_maxfl,
    "fedfa": run_epoch_fedfa,
    "ifca": run_epoch_ifca,
    "flsc": run_epoch_flsc,
}


def build_arch(config: ExperimentConfig, datasets) -> MlpArch:
    dim = datasets[0].train[0].shape[1]
    return MlpArch((dim, *config.hidden, config.scenario.classes), config.activation)


class Federation:
    """Holds one run: client states, server-side models, and the metrics log."""

    def __init__(self, config: ExperimentConfig, seed: int | None = None, datasets=None):
        self.config = config
        self.seed = config.seeds[0] if seed is None else seed
        if datasets is None:
            scenario = replace(config.scenario, n_extra=config.n_arrivals)
            datasets = generate(scenario, self.seed)
        self.datasets = datasets
        n_initial = len(datasets) - config.n_arrivals
        if n_initial < 1:
            raise ConfigError("arrival schedule needs more clients than the scenario provides")
        self.arch = build_arch(config, datasets)
        w0 = init_params(self.arch, [self.seed, 1])
        self.ctx = RunContext(config, self.arch, w0, self.seed)
        if config.scheme in ("maxfl", "fedfa"):
            self.ctx.global_model = w0
        if config.scheme in ("ifca", "flsc"):
            # cluster 0 starts from the shared initialization; the rest get their own draws
            self.ctx.cluster_models = [w0] + [
                init_params(self.arch, [self.seed, 1, k]) for k in range(1, config.n_groups)
            ]
        self.states = [self._new_state(i) for i in range(n_initial)]
        self._arrivals = []
        next_id = n_initial
        for epoch in sorted(config.arrivals):
            for _ in range(config.arrivals[epoch]):
                self._arrivals.append((epoch, next_id))
                next_id += 1
        self.log = MetricsLog(config.scheme, self.seed)
        self.last_groups: list[list[int]] | None = None
        self.partitions: list[Partition] = []

    def _new_state(self, i: int) -> ClientState:
        w0 = self.ctx.w0
        state = ClientState(i, self.datasets[i], w0.with_values(w0.values.copy()),
                            client_rng(self.seed, i))
        if self.config.scheme == "maxfl":
            state.shadow_model = w0.with_values(w0.values.copy())
            state.shadow_rng = client_rng(self.seed, i, 1)
        return state

    def admit_arrivals(self, t: int) -> list[int]:
        arrived = [cid for epoch, cid in self._arrivals if epoch == t]
        for cid in arrived:
            state = self._new_state(cid)
            scheme = self.config.scheme
            if scheme in ("hcct", "hcct_e", "hcct_p"):
                state.pending = t > 0
            elif scheme == "global" and self.states:
                state.model = self.states[0].model.with_values(self.states[0].model.values.copy())
            elif scheme in ("maxfl", "fedfa"):
                state.model = self.ctx.global_model.with_values(self.ctx.global_model.values.copy())
            self.states.append(state)
        return arrived

    def step(self, t: int) -> Partition:
        self.admit_arrivals(t)
        out = EPOCH_FUNCS[self.config.scheme](self.states, t, self.ctx)
        partition = out[1]
        self.partitions.append(partition)
        self.last_groups = [list(g) for g in partition.groups]
        return partition

    def evaluate(self, epoch: int) -> EpochRecord:
        arch = self.arch
        states = self.states
        rec = EpochRecord(
            epoch=epoch,
            clients=[s.id for s in states],
            test_error=[test_error(s.model, arch, s.dataset.test) for s in states],
            train_loss=[dataset_loss(s.model, arch, s.dataset.train) for s in states],
            groups=self.last_groups,
        )
        rec.utility = self._utilities()
        rec.grad_norm_sum = grad_norm_sum([s.model for s in states], [s.dataset for s in states], arch)
        if self.config.kappa:
            probe = self.ctx.w0 if epoch == 0 else states[0].model
            rec.kappa = kappa_estimate([s.dataset for s in states], arch, probe).tolist()
        if self.partitions:
            rec.sim_macs = self.partitions[-1].sim_macs
            rec.sim_evals = self.partitions[-1].sim_evals
        return rec

    def _utilities(self):
        if self.last_groups is None or any(s.last_gradient is None for s in self.states):
            return [None] * len(self.states)
        pos = {s.id: i for i, s in enumerate(self.states)}
        groups = [[pos[c] for c in g] for g in self.last_groups]
        variant = self.config.scheme if self.config.scheme.startswith("hcct") else "hcct"
        view = _gradient_view(self.ctx, variant)
        grads = [view(s.last_gradient) for s in self.states]
        up = _utility_params(self.ctx, variant)
        util = client_utilities(groups, grads, [s.size for s in self.states], up)
        return [util[i] for i in range(len(self.states))]

    def run(self) -> MetricsLog:
        self.log.records.append(self.evaluate(0))
        for t in range(self.config.epochs):
            self.step(t)
            self.log.records.append(self.evaluate(t + 1))
        return self.log


def run_experiment(config: ExperimentConfig, seed: int | None = None, datasets=None) -> MetricsLog:
    return Federation(config, seed, datasets).run()
