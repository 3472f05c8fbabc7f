"""Experiment configuration: one YAML file, explicit sections, strict keys.

Unknown keys are errors, not warnings — silent config drift is the main
reproducibility hazard in sweep experiments. Every run writes its fully
resolved config (all defaults expanded) into the output directory before
doing anything else, so a run directory is self-describing.

The bottleneck strength is written as ``lambda`` in config files (matching
the score formula) and stored as ``BottleneckSpec.weight`` internally.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Sequence

import yaml

from .agents import ListenerTrainConfig
from .corpus import WorldSpec
from .game import BOTTLENECK_KINDS, BottleneckSpec
from .lm import DecodeConfig, ModelConfig, PretrainConfig
from .perturb import PerturbationSpec, default_grid
from .rl import AlternationSchedule, PPOConfig


class ConfigError(ValueError):
    """A config file problem, always naming the offending section/key."""


@dataclass(frozen=True)
class DatasetSection:
    """Sizes of the generated splits and the pretraining-subset rates."""

    n_train: int = 1024
    n_holdout: int = 200
    keep_probability: float = 0.5
    n_demonstrations: int = 4
    telegraphic_probability: float = 0.25

    def __post_init__(self):
        if self.n_train < 1 or self.n_holdout < 0:
            raise ValueError("n_train must be >= 1 and n_holdout >= 0")
        if not 0.0 < self.keep_probability <= 1.0:
            raise ValueError("keep_probability must be in (0, 1]")
        if self.n_demonstrations < 1:
            raise ValueError("n_demonstrations must be >= 1")
        if not 0.0 <= self.telegraphic_probability <= 1.0:
            raise ValueError("telegraphic_probability must be in [0, 1]")


@dataclass(frozen=True)
class ModelSection:
    """Speaker/listener transformer dimensions (vocabulary size comes from
    the world, so it is not configurable here)."""

    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    max_seq_len: int = 160


@dataclass(frozen=True)
class SweepSection:
    kinds: tuple[str, ...] = ("length", "surprisal")
    lambdas: tuple[float, ...] = (0.0, 0.1, 0.5, 0.9, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        for kind in self.kinds:
            if kind not in BOTTLENECK_KINDS or kind == "none":
                raise ValueError(f"sweep kind must be a priced bottleneck, got {kind!r}")
        for lam in self.lambdas:
            if not 0.0 <= lam <= 1.0:
                raise ValueError(f"lambda must be in [0, 1], got {lam}")
        if not self.kinds or not self.lambdas:
            raise ValueError("sweep needs at least one kind and one lambda")


@dataclass(frozen=True)
class PerturbationsSection:
    n_episodes: int = 500
    grid: tuple[tuple[str, PerturbationSpec], ...] = field(
        default_factory=lambda: tuple(default_grid()))

    def __post_init__(self):
        if self.n_episodes < 1:
            raise ValueError("n_episodes must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    listener: ListenerTrainConfig = field(default_factory=ListenerTrainConfig)
    bottleneck: BottleneckSpec = field(default_factory=BottleneckSpec)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    sweep: SweepSection = field(default_factory=SweepSection)
    perturbations: PerturbationsSection = field(default_factory=PerturbationsSection)
    mixed: AlternationSchedule = field(default_factory=AlternationSchedule)
    seeds: tuple[int, ...] = (7, 42, 99)
    checkpoint_interval: int = 50

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size,
                           **dataclasses.asdict(self.model))


def _build(cls, payload: Any, section: str, aliases: dict[str, str] | None = None):
    """Construct a config dataclass from a mapping, rejecting unknown keys."""
    if payload is None:
        payload = {}
    if not isinstance(payload, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    aliases = aliases or {}
    valid = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in payload.items():
        name = aliases.get(key, key)
        if name not in valid:
            raise ConfigError(f"unknown key {key!r} in section {section!r}")
        if name in kwargs:
            raise ConfigError(f"key {key!r} duplicates another in section {section!r}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {section!r}: {exc}") from exc


def _build_grid(payload: Any) -> tuple[tuple[str, PerturbationSpec], ...]:
    if not isinstance(payload, (list, tuple)):
        raise ConfigError("perturbations.grid must be a list of conditions")
    cells = []
    for i, entry in enumerate(payload):
        if not isinstance(entry, dict):
            raise ConfigError(f"perturbations.grid[{i}] must be a mapping")
        entry = dict(entry)
        level = str(entry.pop("level", "-"))
        spec = _build(PerturbationSpec, entry, f"perturbations.grid[{i}]")
        cells.append((level, spec))
    return tuple(cells)


_SECTIONS = ("world", "dataset", "model", "decode", "pretrain", "listener",
             "bottleneck", "ppo", "sweep", "perturbations", "mixed", "seeds",
             "checkpoint_interval")


def config_from_dict(payload: dict | None) -> ExperimentConfig:
    if payload is None:
        payload = {}
    if not isinstance(payload, dict):
        raise ConfigError("top level of the config must be a mapping")
    for key in payload:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown top-level key {key!r}")
    perturb_payload = payload.get("perturbations")
    if perturb_payload is None:
        perturb_payload = {}
    if not isinstance(perturb_payload, dict):
        raise ConfigError("section 'perturbations' must be a mapping")
    perturb_payload = dict(perturb_payload)
    grid_payload = perturb_payload.pop("grid", None)
    perturbations = _build(PerturbationsSection, perturb_payload, "perturbations")
    if grid_payload is not None:
        perturbations = dataclasses.replace(
            perturbations, grid=_build_grid(grid_payload))
    kwargs = {
        "world": _build(WorldSpec, payload.get("world"), "world"),
        "dataset": _build(DatasetSection, payload.get("dataset"), "dataset"),
        "model": _build(ModelSection, payload.get("model"), "model"),
        "decode": _build(DecodeConfig, payload.get("decode"), "decode"),
        "pretrain": _build(PretrainConfig, payload.get("pretrain"), "pretrain"),
        "listener": _build(ListenerTrainConfig, payload.get("listener"), "listener"),
        "bottleneck": _build(BottleneckSpec, payload.get("bottleneck"), "bottleneck",
                             aliases={"lambda": "weight"}),
        "ppo": _build(PPOConfig, payload.get("ppo"), "ppo"),
        "sweep": _build(SweepSection, payload.get("sweep"), "sweep"),
        "perturbations": perturbations,
        "mixed": _build(AlternationSchedule, payload.get("mixed"), "mixed"),
    }
    if "seeds" in payload:
        seeds = payload["seeds"]
        if not isinstance(seeds, (list, tuple)):
            raise ConfigError("'seeds' must be a list of integers")
        kwargs["seeds"] = tuple(seeds)
    if "checkpoint_interval" in payload:
        kwargs["checkpoint_interval"] = payload["checkpoint_interval"]
    try:
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        payload = yaml.safe_load(fh)
    return config_from_dict(payload)


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def resolved_dict(cfg: ExperimentConfig) -> dict:
    """Fully expanded, YAML-serializable view of a config (round-trips
    through config_from_dict)."""
    bneck = dataclasses.asdict(cfg.bottleneck)
    bneck["lambda"] = bneck.pop("weight")
    grid = [dict(level=level, **dataclasses.asdict(spec))
            for level, spec in cfg.perturbations.grid]
    out = {
        "world": dataclasses.asdict(cfg.world),
        "dataset": dataclasses.asdict(cfg.dataset),
        "model": dataclasses.asdict(cfg.model),
        "decode": dataclasses.asdict(cfg.decode),
        "pretrain": dataclasses.asdict(cfg.pretrain),
        "listener": dataclasses.asdict(cfg.listener),
        "bottleneck": bneck,
        "ppo": dataclasses.asdict(cfg.ppo),
        "sweep": dataclasses.asdict(cfg.sweep),
        "perturbations": {"n_episodes": cfg.perturbations.n_episodes, "grid": grid},
        "mixed": dataclasses.asdict(cfg.mixed),
        "seeds": list(cfg.seeds),
        "checkpoint_interval": cfg.checkpoint_interval,
    }
    return _plain(out)


def save_resolved(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(resolved_dict(cfg), fh, sort_keys=False)
