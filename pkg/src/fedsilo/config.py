"""Experiment configuration: dataclass, TOML parsing, overrides.

Config files are TOML. Top-level tables map to the sections below; every key
is optional except ``scenario.kind`` and ``scheme.name``.

    [scenario]   kind, n_clients, classes, feature_dim, split, n_sources,
                 samples_per_client, source_separation, class_scale,
                 disjoint_labels, base_size, min_size, unit_sizes, test_size,
                 n_shards, shard_size, per_class, paths
    [scheme]     name, n_groups (ifca/flsc, default 5), soft_groups (flsc, default 2)
    [model]      hidden (default [32]), activation (default "relu")
    [train]      epochs (20), local_epochs (1.0), local_steps (unset),
                 batch_size (64), lr (0.1), decay (0.995)
    [hcct]       alpha (1.0), beta (2.0), forced_k (unset)
    [run]        seeds ([0]), kappa (false), threads (1), out (".")
    [arrivals]   "<epoch>" = <count>
"""
from __future__ import annotations

import dataclasses
import difflib
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data_gen import ScenarioSpec
from .errors import ConfigError

SCHEMES = ("hcct", "hcct_e", "hcct_p", "independent", "global", "maxfl", "fedfa", "ifca", "flsc")

SECTIONS = {
    "scenario": {f.name for f in dataclasses.fields(ScenarioSpec) if f.name != "n_extra"},
    "scheme": {"name", "n_groups", "soft_groups"},
    "model": {"hidden", "activation"},
    "train": {"epochs", "local_epochs", "local_steps", "batch_size", "lr", "decay"},
    "hcct": {"alpha", "beta", "forced_k"},
    "run": {"seeds", "kappa", "threads", "out"},
    "arrivals": None,  # free-form epoch -> count
}

# `--override scheme=global` style shorthands
SHORTHANDS = {"scheme": "scheme.name", "alpha": "hcct.alpha", "beta": "hcct.beta",
              "epochs": "train.epochs", "seeds": "run.seeds", "forced_k": "hcct.forced_k",
              "split": "scenario.split"}


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioSpec
    scheme: str = "hcct"
    n_groups: int = 5
    soft_groups: int = 2
    hidden: tuple[int, ...] = (32,)
    activation: str = "relu"
    epochs: int = 20
    local_epochs: float = 1.0
    local_steps: int | None = None
    batch_size: int = 64
    lr: float = 0.1
    decay: float = 0.995
    alpha: float = 1.0
    beta: float = 2.0
    forced_k: int | None = None
    seeds: tuple[int, ...] = (0,)
    arrivals: dict[int, int] = field(default_factory=dict)
    kappa: bool = False
    threads: int = 1
    out: str = "."

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if self.scheme not in SCHEMES:
            out.append(f"scheme.name: must be one of {SCHEMES}, got {self.scheme!r}")
        if self.scheme == "flsc" and not 1 <= self.soft_groups <= self.n_groups:
            out.append("scheme.soft_groups: must lie in [1, n_groups]")
        if self.n_groups < 1:
            out.append("scheme.n_groups: must be >= 1")
        if any(h < 1 for h in self.hidden):
            out.append("model.hidden: widths must be positive")
        if self.scheme == "hcct_p" and not self.hidden:
            out.append("model.hidden: hcct_p needs at least one hidden layer")
        if self.activation not in ("relu", "tanh"):
            out.append("model.activation: must be relu or tanh")
        if self.epochs < 0:
            out.append("train.epochs: must be >= 0")
        if not self.local_epochs > 0:
            out.append("train.local_epochs: must be > 0")
        if self.local_steps is not None and self.local_steps < 1:
            out.append("train.local_steps: must be >= 1")
        if self.batch_size < 1:
            out.append("train.batch_size: must be >= 1")
        if not self.lr >= 0:
            out.append("train.lr: must be >= 0")
        if not 0 < self.decay <= 1:
            out.append("train.decay: must lie in (0, 1]")
        if not self.alpha > 0:
            out.append("hcct.alpha: must be > 0")
        if not self.beta > 0:
            out.append("hcct.beta: must be > 0")
        if self.forced_k is not None and self.forced_k < 1:
            out.append("hcct.forced_k: must be >= 1")
        if not self.seeds:
            out.append("run.seeds: must be non-empty")
        if self.threads < 1:
            out.append("run.threads: must be >= 1")
        for epoch, count in self.arrivals.items():
            if epoch < 0 or count < 0:
                out.append(f"arrivals.{epoch}: epoch and count must be >= 0")
        return out

    def lr_at(self, t: int) -> float:
        return self.lr * self.decay**t

    @property
    def n_arrivals(self) -> int:
        return sum(self.arrivals.values())


def _suggest(key, known):
    close = difflib.get_close_matches(key, sorted(known), n=1)
    return f" (did you mean {close[0]!r}?)" if close else ""


def _check_keys(data: dict) -> list[str]:
    problems = []
    for section, body in data.items():
        if section not in SECTIONS:
            problems.append(f"{section}: unknown section{_suggest(section, SECTIONS)}")
            continue
        if not isinstance(body, dict):
            problems.append(f"{section}: expected a table")
            continue
        allowed = SECTIONS[section]
        if allowed is None:
            continue
        for key in body:
            if key not in allowed:
                problems.append(f"{section}.{key}: unknown key{_suggest(key, allowed)}")
    return problems


def _to_int(path, value, problems):
    if isinstance(value, bool) or not isinstance(value, int):
        problems.append(f"{path}: expected an integer, got {value!r}")
        return None
    return value


def from_dict(data: dict) -> ExperimentConfig:
    problems = _check_keys(data)
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    scen = dict(data.get("scenario", {}))
    if "kind" not in scen:
        raise ConfigError("scenario.kind: required")
    if "paths" in scen:
        scen["paths"] = tuple(str(p) for p in scen["paths"])
    scheme = data.get("scheme", {})
    if "name" not in scheme:
        raise ConfigError("scheme.name: required")
    kwargs = {"scheme": scheme["name"]}
    for key in ("n_groups", "soft_groups"):
        if key in scheme:
            kwargs[key] = scheme[key]
    model = data.get("model", {})
    if "hidden" in model:
        kwargs["hidden"] = tuple(model["hidden"])
    if "activation" in model:
        kwargs["activation"] = model["activation"]
    kwargs.update(data.get("train", {}))
    kwargs.update(data.get("hcct", {}))
    run = dict(data.get("run", {}))
    if "seeds" in run:
        seeds = run.pop("seeds")
        kwargs["seeds"] = tuple(seeds) if isinstance(seeds, list) else (seeds,)
    kwargs.update(run)
    arrivals = {}
    problems = []
    for epoch, count in data.get("arrivals", {}).items():
        try:
            arrivals[int(epoch)] = _to_int(f"arrivals.{epoch}", count, problems)
        except ValueError:
            problems.append(f"arrivals.{epoch}: keys must be epoch numbers")
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    kwargs["arrivals"] = arrivals
    env_seed = os.environ.get("FEDSILO_SEED")
    if env_seed:
        try:
            kwargs["seeds"] = tuple(int(s) for s in env_seed.replace(",", " ").split())
        except ValueError:
            raise ConfigError(f"FEDSILO_SEED must list integers, got {env_seed!r}") from None
    try:
        return ExperimentConfig(scenario=ScenarioSpec(**scen), **kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def parse_value(text: str):
    """Parse an override value as a TOML literal, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    data = {k: dict(v) if isinstance(v, dict) else v for k, v in data.items()}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        key = SHORTHANDS.get(key.strip(), key.strip())
        if "." not in key:
            raise ConfigError(f"override key {key!r} needs a section, e.g. train.{key}")
        section, name = key.split(".", 1)
        data.setdefault(section, {})[name] = parse_value(value.strip())
    return data


def load_toml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def parse_config(path, overrides=None) -> ExperimentConfig:
    return from_dict(apply_overrides(load_toml(path), overrides))


def to_dict(config: ExperimentConfig) -> dict:
    """Inverse of ``from_dict``; unset optional values are left out since TOML has no null."""
    scen = dataclasses.asdict(config.scenario)
    scen.pop("n_extra")
    scen["paths"] = list(scen["paths"])
    data = {
        "scenario": scen,
        "scheme": {"name": config.scheme, "n_groups": config.n_groups,
                   "soft_groups": config.soft_groups},
        "model": {"hidden": list(config.hidden), "activation": config.activation},
        "train": {"epochs": config.epochs, "local_epochs": config.local_epochs,
                  "local_steps": config.local_steps, "batch_size": config.batch_size,
                  "lr": config.lr, "decay": config.decay},
        "hcct": {"alpha": config.alpha, "beta": config.beta, "forced_k": config.forced_k},
        "run": {"seeds": list(config.seeds), "kappa": config.kappa, "threads": config.threads,
                "out": config.out},
        "arrivals": {str(k): v for k, v in sorted(config.arrivals.items())},
    }
    return {name: {k: v for k, v in body.items() if v is not None} for name, body in data.items()}
