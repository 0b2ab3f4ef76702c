"""Run configuration.

Precedence, lowest to highest: built-in defaults, the config file's
``defaults:`` section, the file's top-level keys, command-line flags.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .data import WorldConfig
from .hypgeom import EXP_VARIANTS

TOGGLES = ("clustering_loss", "weather_bn", "queue_agg")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    scenario: str = "i"
    rounds: int = 100
    clients_per_round: int = 5
    lambda_cl: float = 140.0
    beta: float = 0.85
    beta_prime: float = 0.85
    queue_size: int = 5
    gamma_init: float = 0.1
    lr_client: float = 1e-4
    lr_gamma: float = 1e-3
    local_epochs: int = 1
    batch_size: int = 8
    bn_momentum: float = 0.1
    hidden: tuple[int, int] = (32, 16)

    pretrain_epochs: int = 5
    pretrain_batch: int = 16
    pretrain_lr: float = 0.05
    pretrain_momentum: float = 0.9
    pretrain_power: float = 0.9
    clf_epochs: int = 8
    clf_batch: int = 88
    clf_lr: float = 0.05

    n_source_per_agent: int = 800
    test_car: tuple[int, int, int, int] = (40, 20, 20, 20)
    test_drone: tuple[int, int, int, int] = (20, 20, 20, 20)

    seed: int = 0
    world_seed: int = 0
    world: dict = field(default_factory=dict)

    clustering_loss: bool = True
    weather_bn: bool = True
    queue_agg: bool = True
    geometry: str = "hyperbolic"
    exp_map: str = "vnorm"
    proto_ema: str = "coordinate"
    fedavg_weighted: bool = False

    workers: int = 1
    eval_every: int = 1
    save_checkpoints: bool = False

    def __post_init__(self):
        problems = []
        if self.scenario not in ("i", "ii", "iii"):
            problems.append(f"scenario must be i, ii or iii (got {self.scenario!r})")
        if self.rounds < 0:
            problems.append("rounds must be >= 0")
        if self.clients_per_round < 1:
            problems.append("clients_per_round must be >= 1")
        if not 0.0 <= self.beta <= 1.0 or not 0.0 <= self.beta_prime <= 1.0:
            problems.append("beta and beta_prime must lie in [0, 1]")
        if self.queue_size < 0:
            problems.append("queue_size must be >= 0")
        if self.gamma_init <= 0:
            problems.append("gamma_init must be positive")
        if self.geometry not in ("hyperbolic", "euclidean"):
            problems.append("geometry must be hyperbolic or euclidean")
        if self.exp_map not in EXP_VARIANTS:
            problems.append(f"exp_map must be one of {EXP_VARIANTS}")
        if self.proto_ema not in ("coordinate", "geodesic"):
            problems.append("proto_ema must be coordinate or geodesic")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        bad_world = set(self.world) - {f.name for f in fields(WorldConfig)}
        if bad_world:
            problems.append(f"unknown world keys: {sorted(bad_world)}")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def effective_queue(self) -> int:
        return self.queue_size if self.queue_agg else 0

    @property
    def effective_lambda(self) -> float:
        return self.lambda_cl if self.clustering_loss else 0.0

    def world_config(self) -> WorldConfig:
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in self.world.items()}
        return WorldConfig(seed=self.world_seed, **kw)

    def replace(self, **changes) -> "RunConfig":
        return build_config({**self.to_dict(), **changes})

    def to_dict(self) -> dict:
        return {f.name: _plain(getattr(self, f.name)) for f in fields(self)}


def _plain(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def build_config(values: dict[str, Any]) -> RunConfig:
    known = {f.name: f for f in fields(RunConfig)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kw = {}
    for k, v in values.items():
        default = getattr(RunConfig, k, None) if k in known else None
        if isinstance(default, tuple) and isinstance(v, list):
            v = tuple(v)
        kw[k] = v
    try:
        return RunConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: expected a mapping at top level")
        defaults = raw.pop("defaults", None) or {}
        if not isinstance(defaults, dict):
            raise ConfigError(f"{p}: 'defaults' must be a mapping")
        values.update(defaults)
        values.update(raw)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(values)


REFERENCE_DEFAULTS = {
    "lambda_cl": "140, reference clustering-loss weight",
    "beta": "0.85, reference client prototype smoothing rate",
    "beta_prime": "0.85, server prototype smoothing (same as beta)",
    "queue_size": "5, reference queue length",
    "gamma_init": "0.1, reference curvature initialization",
    "rounds": "100, reference number of adaptation rounds",
    "clients_per_round": "5, reference clients per round",
}


def config_header(cfg: RunConfig) -> dict:
    """Fully resolved config plus the origin of each reference default."""
    return {**cfg.to_dict(), "defaults_provenance": REFERENCE_DEFAULTS}


def dump(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
