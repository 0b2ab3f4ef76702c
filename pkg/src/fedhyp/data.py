"""Procedural source/target data for two agent types under four weathers.

Each sample is a ``grid x grid`` map of ``in_dim``-dimensional cells with a
class label per cell, so per-class IoU stays meaningful without images.

Cell generation for agent ``a`` in weather ``w`` of domain ``d``::

    x = scale[d, a, w] * (mean[a, label] + noise * eps) + offset[d, a, w]

The last ``cue_dims`` input channels carry no class information, only an
illumination level per weather; the weather classifier keys on them.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import WEATHERS, Weather, write_npz

DATASET_FORMAT = "fedhyp.dataset/1"


class Agent(enum.IntEnum):
    CAR = 0
    DRONE = 1


class Scenario(enum.Enum):
    I = "i"
    II = "ii"
    III = "iii"


# Drone evaluation folds the car-only classes into their drone parent class.
DRONE_REMAP = {0: 0, 1: 1, 2: 2, 3: 3, 4: 2, 5: 3}


@dataclass(frozen=True)
class WorldConfig:
    """Fixed random structure of the simulated world (class layout and domain shifts)."""

    seed: int = 0
    in_dim: int = 8
    cue_dims: int = 2
    grid: int = 8
    n_car_classes: int = 6
    n_drone_classes: int = 4
    class_spread: float = 1.6
    noise: float = 0.8
    regions_per_image: int = 5
    weather_scale: tuple[float, float, float, float] = (1.0, 0.6, 0.85, 0.7)
    source_weather_offset: float = 0.5
    target_offset: tuple[float, float, float, float] = (1.5, 3.5, 3.0, 3.2)
    target_scale: tuple[float, float, float, float] = (0.9, 0.7, 1.2, 0.6)
    cue_levels: tuple[float, float, float, float] = (1.5, -1.5, 0.5, -0.5)
    cue_noise: float = 0.3
    target_cue_shift: float = 0.2
    drone_view_scale: float = 0.25
    car_class_prior: tuple[float, ...] = (0.3, 0.2, 0.15, 0.15, 0.1, 0.1)
    drone_class_prior: tuple[float, ...] = (0.35, 0.3, 0.2, 0.15)

    @property
    def cue_channels(self) -> tuple[int, ...]:
        """Input channels carrying only the weather illumination level."""
        return tuple(range(self.in_dim - self.cue_dims, self.in_dim))

    def classes(self, agent: Agent) -> np.ndarray:
        return np.arange(self.n_car_classes if agent == Agent.CAR else self.n_drone_classes)


@dataclass(frozen=True)
class DomainSpec:
    agent: Agent
    weather: Weather
    class_means: np.ndarray
    scale: float
    offset: np.ndarray
    noise_scale: float
    class_prior: np.ndarray


def domain_specs(world: WorldConfig, domain: str = "source") -> dict[tuple[Agent, Weather], DomainSpec]:
    """One DomainSpec per (agent, weather) for ``domain`` in {source, target}."""
    if domain not in ("source", "target"):
        raise ValueError(f"domain must be 'source' or 'target', got {domain!r}")
    rng = np.random.default_rng([world.seed, 17])
    content = world.in_dim - world.cue_dims
    car_means = np.zeros((world.n_car_classes, world.in_dim))
    car_means[:, :content] = rng.normal(0.0, world.class_spread, (world.n_car_classes, content))
    view_diag = 1.0 + rng.uniform(-world.drone_view_scale, world.drone_view_scale, content)
    view_shift = rng.normal(0.0, world.drone_view_scale, content)
    drone_means = car_means[: world.n_drone_classes].copy()
    drone_means[:, :content] = drone_means[:, :content] * view_diag + view_shift

    def unit(v):
        return v / np.linalg.norm(v)

    src_off = {w: unit(rng.normal(size=content)) * world.source_weather_offset for w in WEATHERS}
    tgt_dir = {(a, w): unit(rng.normal(size=content)) for a in Agent for w in WEATHERS}
    shared_dir = {w: unit(rng.normal(size=content)) for w in WEATHERS}

    specs = {}
    for agent in Agent:
        means = car_means if agent == Agent.CAR else drone_means
        prior = np.array(world.car_class_prior if agent == Agent.CAR else world.drone_class_prior)
        for w in WEATHERS:
            offset = np.zeros(world.in_dim)
            offset[:content] = src_off[w]
            scale = world.weather_scale[w]
            if domain == "target":
                # mostly weather-specific, partly agent-specific
                d = unit(0.8 * shared_dir[w] + 0.2 * tgt_dir[(agent, w)])
                offset[:content] += world.target_offset[w] * d
                scale = scale * world.target_scale[w]
            offset[content:] = world.cue_levels[w] + (world.target_cue_shift if domain == "target" else 0.0)
            specs[(agent, w)] = DomainSpec(agent, w, means, scale, offset, world.noise, prior / prior.sum())
    return specs


def _label_maps(n: int, world: WorldConfig, prior: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    g = world.grid
    yy, xx = np.mgrid[0:g, 0:g]
    cells = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(float)
    seeds = rng.uniform(0, g, (n, world.regions_per_image, 2))
    region_cls = rng.choice(len(prior), size=(n, world.regions_per_image), p=prior)
    d2 = ((cells[None, :, None, :] - seeds[:, None, :, :]) ** 2).sum(-1)
    nearest = d2.argmin(axis=2)
    return np.take_along_axis(region_cls, nearest, axis=1).reshape(n, g, g)


def sample_images(spec: DomainSpec, n: int, world: WorldConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    labels = _label_maps(n, world, spec.class_prior, rng)
    eps = rng.normal(size=labels.shape + (world.in_dim,))
    x = spec.scale * (spec.class_means[labels] + spec.noise_scale * eps) + spec.offset
    content = world.in_dim - world.cue_dims
    x[..., content:] = spec.offset[content:] + world.cue_noise * eps[..., content:]
    return x, labels


@dataclass
class Dataset:
    """Columnar sample store; ``labels`` and ``weather`` are ground truth."""

    features: np.ndarray
    labels: np.ndarray
    weather: np.ndarray
    agent: np.ndarray
    sample_id: np.ndarray
    client_id: np.ndarray

    def __len__(self) -> int:
        return len(self.sample_id)

    def subset(self, idx) -> "Dataset":
        return Dataset(*(getattr(self, f)[idx] for f in _COLUMNS))

    def select(self, agent: Agent | None = None, weather: Weather | None = None) -> "Dataset":
        m = np.ones(len(self), bool)
        if agent is not None:
            m &= self.agent == int(agent)
        if weather is not None:
            m &= self.weather == int(weather)
        return self.subset(np.flatnonzero(m))

    @staticmethod
    def concat(parts: list["Dataset"]) -> "Dataset":
        return Dataset(*(np.concatenate([getattr(p, f) for p in parts]) for f in _COLUMNS))


_COLUMNS = ("features", "labels", "weather", "agent", "sample_id", "client_id")


def _allocate(n: int, mix: np.ndarray) -> np.ndarray:
    """Integer counts summing to ``n`` closest to ``n * mix`` (largest remainder)."""
    raw = n * np.asarray(mix, float) / np.sum(mix)
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts


def _generate(specs, plan, world, rng, id_offset, client_id=-1) -> Dataset:
    """``plan``: list of (agent, weather, count)."""
    parts = []
    next_id = id_offset
    for agent, w, count in plan:
        if count == 0:
            continue
        x, y = sample_images(specs[(agent, w)], count, world, rng)
        parts.append(Dataset(x, y, np.full(count, int(w)), np.full(count, int(agent)),
                             np.arange(next_id, next_id + count), np.full(count, client_id)))
        next_id += count
    return Dataset.concat(parts)


def gen_source(specs, n_per_agent: int, seed: int, world: WorldConfig,
               weather_mix=(0.25, 0.25, 0.25, 0.25), id_offset: int = 0) -> Dataset:
    """Labeled, weather-tagged source data covering both agents."""
    if n_per_agent < 1:
        raise ValueError("n_per_agent must be >= 1")
    rng = np.random.default_rng([seed, 1])
    counts = _allocate(n_per_agent, weather_mix)
    plan = [(a, w, int(counts[w])) for a in Agent for w in WEATHERS]
    return _generate(specs, plan, world, rng, id_offset)


def gen_test(specs, n_per_weather: dict, seed: int, world: WorldConfig, id_offset: int = 2_000_000) -> Dataset:
    """Held-out evaluation split; ``n_per_weather[agent]`` is a 4-tuple of counts."""
    rng = np.random.default_rng([seed, 3])
    plan = [(a, w, int(n_per_weather[a][w])) for a in Agent for w in WEATHERS]
    return _generate(specs, plan, world, rng, id_offset)


# ---------------------------------------------------------------------------
# federated target split


@dataclass
class ScenarioConfig:
    scenario: Scenario
    n_car: int
    n_drone: int
    car_samples: tuple[int, int] = (69, 72)
    drone_samples: tuple[int, int] = (24, 25)
    weather_mix: list[np.ndarray] = field(default_factory=list)

    @property
    def n_clients(self) -> int:
        return self.n_car + self.n_drone

    def agent_of(self, client: int) -> Agent:
        return Agent.CAR if client < self.n_car else Agent.DRONE


def _mixed_weather(rng, adverse_only: bool = False) -> np.ndarray:
    mix = np.zeros(len(WEATHERS))
    k = rng.integers(1, 4)
    adverse = rng.choice([1, 2, 3], size=k, replace=False)
    if adverse_only:
        mix[adverse] = rng.dirichlet(np.ones(k))
        return mix
    clear = rng.uniform(0.5, 0.8)
    mix[Weather.CLEAR] = clear
    mix[adverse] = (1 - clear) * rng.dirichlet(np.ones(k))
    return mix


def scenario_config(scenario: Scenario | str, seed: int = 0) -> ScenarioConfig:
    """Client population and per-client weather proportions for a scenario."""
    scenario = Scenario(scenario) if not isinstance(scenario, Scenario) else scenario
    rng = np.random.default_rng([seed, 5])
    n_car, n_drone = (32, 8) if scenario == Scenario.I else (32, 32)
    cfg = ScenarioConfig(scenario, n_car, n_drone)
    if scenario == Scenario.III:
        for n in (n_car, n_drone):
            ws = np.resize(np.arange(len(WEATHERS)), n)
            rng.shuffle(ws)
            cfg.weather_mix.extend(np.eye(len(WEATHERS))[w] for w in ws)
        return cfg
    for c in range(cfg.n_clients):
        # in (ii) a quarter of the drones fly only in adverse conditions
        adverse_only = scenario == Scenario.II and c >= n_car and (c - n_car) % 4 == 3
        cfg.weather_mix.append(_mixed_weather(rng, adverse_only))
    return cfg


class PrivacyError(AttributeError):
    """Ground truth of a client dataset was requested after it had been stripped."""


@dataclass
class ClientDataset:
    client_id: int
    agent: Agent
    samples: np.ndarray
    sample_ids: np.ndarray
    _hidden_labels: np.ndarray | None = field(default=None, repr=False)
    _hidden_weather: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def hidden_labels(self) -> np.ndarray:
        if self._hidden_labels is None:
            raise PrivacyError(f"client {self.client_id}: labels are not available")
        return self._hidden_labels

    @property
    def hidden_weather(self) -> np.ndarray:
        if self._hidden_weather is None:
            raise PrivacyError(f"client {self.client_id}: weather tags are not available")
        return self._hidden_weather

    def stripped(self) -> "ClientDataset":
        return ClientDataset(self.client_id, self.agent, self.samples, self.sample_ids)


def gen_target(specs, cfg: ScenarioConfig, seed: int, world: WorldConfig, id_offset: int = 1_000_000) -> list[ClientDataset]:
    """Disjoint unlabeled client datasets drawn from the target domains."""
    clients = []
    next_id = id_offset
    for c in range(cfg.n_clients):
        rng = np.random.default_rng([seed, 7, c])
        agent = cfg.agent_of(c)
        lo, hi = cfg.car_samples if agent == Agent.CAR else cfg.drone_samples
        n = int(rng.integers(lo, hi + 1))
        counts = _allocate(n, cfg.weather_mix[c])
        ds = _generate(specs, [(agent, w, int(counts[w])) for w in WEATHERS], world, rng, next_id, c)
        order = rng.permutation(len(ds))
        ds = ds.subset(order)
        next_id += n
        clients.append(ClientDataset(c, agent, ds.features, ds.sample_id, ds.labels, ds.weather))
    return clients


def clients_to_dataset(clients: list[ClientDataset]) -> Dataset:
    return Dataset.concat([
        Dataset(c.samples, c.hidden_labels, c.hidden_weather, np.full(len(c), int(c.agent)), c.sample_ids,
                np.full(len(c), c.client_id)) for c in clients])


def dataset_to_clients(ds: Dataset) -> list[ClientDataset]:
    out = []
    for cid in np.unique(ds.client_id):
        part = ds.subset(np.flatnonzero(ds.client_id == cid))
        out.append(ClientDataset(int(cid), Agent(int(part.agent[0])), part.features, part.sample_id, part.labels, part.weather))
    return out


# ---------------------------------------------------------------------------
# serialization


def save_dataset(path: str | Path, ds: Dataset, meta: dict | None = None) -> Path:
    """Columns: sample_id, client_id, agent, weather, labels, features (+ json header)."""
    header = json.dumps({"format": DATASET_FORMAT, "meta": meta or {}}, sort_keys=True)
    return write_npz(path, {"header": np.array(header), **{c: getattr(ds, c) for c in _COLUMNS}})


def load_dataset(path: str | Path) -> Dataset:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path}: unsupported dataset format {header.get('format')!r}")
        return Dataset(*(z[c] for c in _COLUMNS))


def sunlit_score(image: np.ndarray) -> float:
    """Sum over the three color channels of the mean pixel intensity, image shaped (H, W, 3)."""
    x = np.asarray(image, dtype=float)
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ValueError(f"sunlit_score expects an (H, W, 3) array, got shape {x.shape}")
    return float(x.mean(axis=(0, 1)).sum())
