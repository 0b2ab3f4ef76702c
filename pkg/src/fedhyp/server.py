"""Server side: pretraining, round orchestration and aggregation."""

from __future__ import annotations

import logging
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import hypgeom as hg
from .client import ClientFailure, ClientUpdate, PrototypeSet, class_prototype, embed, local_round
from .config import RunConfig, config_header
from .data import (
    DRONE_REMAP,
    Agent,
    ClientDataset,
    Dataset,
    WorldConfig,
    domain_specs,
    gen_source,
    gen_target,
    gen_test,
    scenario_config,
)
from .hypgeom import Curvature
from .metrics import Ledger, RoundRecord, class_remap, combined_score, confusion, miou
from .model import (
    WEATHERS,
    LossSpec,
    ModelShape,
    ParamVector,
    TrainingError,
    Weather,
    WeatherClassifier,
    classify_weather,
    fit_weather_classifier,
    forward,
    inherit_banks,
    init_params,
    load_checkpoint,
    loss_and_grad,
    save_checkpoint,
    sgd_step,
)

logger = logging.getLogger(__name__)


@dataclass
class GlobalState:
    model: ParamVector
    queue: deque
    protos: PrototypeSet
    gamma: Curvature
    weather_clf: WeatherClassifier | None = None
    round: int = 0

    @classmethod
    def start(cls, model: ParamVector, protos: PrototypeSet, gamma: Curvature, queue_size: int,
              weather_clf: WeatherClassifier | None = None) -> "GlobalState":
        q = deque(maxlen=queue_size)
        if queue_size:
            q.append(model.copy())
        return cls(model, q, protos, gamma, weather_clf)


@dataclass(frozen=True)
class RoundPlan:
    round: int
    participants: tuple[int, ...]
    seed: int


# ---------------------------------------------------------------------------
# pretraining


def pretrain(source: Dataset, cfg: RunConfig, shape: ModelShape | None = None,
             clf_channels=None) -> tuple[ParamVector, WeatherClassifier]:
    """Supervised cross-entropy on mixed car/drone source batches, then a frozen weather classifier.

    A single batch-norm bank is trained and copied into all four at the end.
    """
    shape = shape or ModelShape(source.features.shape[-1], tuple(cfg.hidden), int(source.labels.max()) + 1)
    rng = np.random.default_rng([cfg.seed, 19])
    params = init_params(shape, np.random.default_rng([cfg.seed, 23]), cfg.gamma_init)
    n = len(source)
    steps_per_epoch = -(-n // cfg.pretrain_batch)
    total = cfg.pretrain_epochs * steps_per_epoch
    velocity: dict = {}
    step = 0
    for epoch in range(cfg.pretrain_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.pretrain_batch):
            idx = order[start:start + cfg.pretrain_batch]
            lr = cfg.pretrain_lr * (1 - step / total) ** cfg.pretrain_power
            try:
                _, grad = loss_and_grad(params, source.features[idx], Weather.CLEAR,
                                        LossSpec(source.labels[idx]), update_stats=True, momentum=cfg.bn_momentum)
            except TrainingError as exc:
                raise TrainingError(f"pretraining diverged at epoch {epoch}, step {step}: {exc}; "
                                    f"config={cfg.to_dict()}") from exc
            sgd_step(params, grad, lr, velocity, cfg.pretrain_momentum)
            step += 1
    params = inherit_banks(params, Weather.CLEAR)
    params.sample_count = n
    clf = fit_weather_classifier(source.features, source.weather, rng, epochs=cfg.clf_epochs,
                                 batch_size=cfg.clf_batch, lr=cfg.clf_lr, channels=clf_channels)
    return params, clf


def initial_prototypes(params: ParamVector, source: Dataset, cfg: RunConfig, chunk: int = 256) -> PrototypeSet:
    """Server-side class prototypes of the pretrained encoder on labeled source cells."""
    gamma = Curvature(cfg.gamma_init)
    n_classes = params["head.w"].shape[1]
    feats = []
    for start in range(0, len(source), chunk):
        f, _ = forward(params, source.features[start:start + chunk], Weather.CLEAR, "eval")
        feats.append(f.reshape(-1, f.shape[-1]))
    f = embed(np.concatenate(feats), gamma, cfg.geometry, cfg.exp_map)
    y = source.labels.reshape(-1)
    ps = PrototypeSet.empty(n_classes, f.shape[1])
    for k in range(n_classes):
        m = y == k
        if m.any():
            ps.protos[k] = class_prototype(f[m], gamma, cfg.geometry)
            ps.present[k] = True
            ps.counts[k] = int(m.sum())
    return ps


# ---------------------------------------------------------------------------
# sampling and aggregation


def sample_clients(all_ids, k: int, rng: np.random.Generator, round_: int = 0) -> RoundPlan:
    ids = np.asarray(list(all_ids))
    if k > len(ids):
        raise ValueError(f"cannot sample {k} clients out of {len(ids)}")
    seed = int(rng.integers(2**31))
    chosen = np.sort(rng.choice(ids, size=k, replace=False))
    return RoundPlan(round_, tuple(int(c) for c in chosen), seed)


def _mean(arrays, weights, ref):
    """Weighted mean written as ``ref + sum w (a - ref) / sum w``; identical inputs give ``ref`` exactly."""
    total = float(np.sum(weights))
    acc = np.zeros_like(ref)
    for a, w in zip(arrays, weights):
        acc = acc + w * (a - ref)
    return ref + acc / total


def aggregate_models(updates: list[ClientUpdate], state: GlobalState, weighted: bool = False,
                     push: bool = True) -> ParamVector:
    """Client mean smoothed with the queued globals; per-weather banks from their own trainers only.

    Banks nobody trained this round are copied from ``state.model`` unchanged.
    The new model is pushed onto ``state.queue`` when ``push`` is set.
    """
    if not updates:
        raise ValueError("aggregate_models needs at least one update")
    updates = sorted(updates, key=lambda u: u.client_id)
    prev = state.model
    for u in updates:
        prev.check_compatible(u.params)
    queue = list(state.queue)
    out = prev.copy()

    def smooth(keys, contributors):
        w = [u.sample_count if weighted else 1.0 for u in contributors]
        for k in keys:
            client_mean = _mean([u.params[k] for u in contributors], w, prev[k])
            out[k] = _mean([client_mean] + [m[k] for m in queue], [1.0] * (len(queue) + 1), prev[k])

    smooth(prev.shared_keys(), updates)
    for wthr in WEATHERS:
        trainers = [u for u in updates if u.weather_counts[wthr] > 0]
        if trainers:
            smooth(prev.bank_keys(wthr), trainers)
    out.sample_count = sum(u.sample_count for u in updates)
    if push and state.queue.maxlen:
        state.queue.append(out.copy())
    return out


def aggregate_prototypes(updates: list[ClientUpdate], state: GlobalState, beta_prime: float,
                         gamma: Curvature | None = None) -> PrototypeSet:
    """Count-weighted client prototypes, smoothed with the previous global ones.

    Classes no participant saw keep their previous prototype.
    """
    prev = state.protos
    out = prev.copy()
    out.counts = np.zeros_like(prev.counts)
    updates = sorted(updates, key=lambda u: u.client_id)
    for k in range(len(prev.counts)):
        counts = np.array([u.protos.counts[k] for u in updates], dtype=float)
        tot = counts.sum()
        if tot <= 0:
            continue
        mix = sum((n / tot) * u.protos.protos[k] for n, u in zip(counts, updates) if n > 0)
        if prev.present[k]:
            out.protos[k] = beta_prime * prev.protos[k] + (1 - beta_prime) * mix
        else:
            out.protos[k] = mix
            out.present[k] = True
        out.counts[k] = int(tot)
    if gamma is not None:
        out.protos = hg.project(out.protos, gamma)
    return out


def aggregate_curvature(updates: list[ClientUpdate], floor: float = hg.GAMMA_FLOOR) -> Curvature:
    """Sample-count weighted mean of client curvatures."""
    if not updates:
        raise ValueError("aggregate_curvature needs at least one update")
    n = np.array([u.sample_count for u in updates], dtype=float)
    g = np.array([u.gamma.gamma for u in updates])
    return Curvature(max(float(np.dot(n, g) / n.sum()), floor), updates[0].gamma.learnable)


# ---------------------------------------------------------------------------
# evaluation


def predict_dataset(params: ParamVector, clf: WeatherClassifier | None, ds: Dataset, use_weather_bn: bool) -> np.ndarray:
    """Per-cell predictions; each image goes through the bank of its predicted weather."""
    banks = classify_weather(clf, ds.features) if (use_weather_bn and clf is not None) else np.zeros(len(ds), int)
    preds = np.zeros(ds.labels.shape, dtype=int)
    for w in WEATHERS:
        idx = np.flatnonzero(banks == w)
        if idx.size:
            preds[idx] = forward(params, ds.features[idx], w, "eval")[1].argmax(axis=-1)
    return preds


def confusions(preds: np.ndarray, ds: Dataset, n_car_classes: int, n_drone_classes: int) -> dict[str, np.ndarray]:
    """Confusion matrices keyed ``{agent}`` and ``{agent}/{weather}``."""
    out = {}
    for agent in Agent:
        for w in (None,) + WEATHERS:
            m = ds.agent == int(agent)
            if w is not None:
                m &= ds.weather == int(w)
            p, y = preds[m], ds.labels[m]
            if agent == Agent.CAR:
                conf = confusion(p, y, n_car_classes)
            else:
                conf = confusion(class_remap(p, DRONE_REMAP), y, n_drone_classes)
            key = agent.name.lower() + ("" if w is None else f"/{w.label}")
            out[key] = conf
    return out


def scores_from_confusions(confs: dict[str, np.ndarray]) -> dict[str, float]:
    n_drone = confs["drone"].shape[0]
    shared = {d: d for d in range(n_drone)}
    out = {
        "car_miou": miou(confs["car"]),
        "drone_miou": miou(confs["drone"]),
        "all": combined_score(confs["car"], confs["drone"], shared),
    }
    for w in WEATHERS:
        out[w.label] = combined_score(confs[f"car/{w.label}"], confs[f"drone/{w.label}"], shared)
    return {k: 100.0 * v for k, v in out.items()}


def evaluate(params: ParamVector, clf: WeatherClassifier | None, ds: Dataset, cfg: RunConfig,
             world: WorldConfig) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    preds = predict_dataset(params, clf, ds, cfg.weather_bn)
    confs = confusions(preds, ds, world.n_car_classes, world.n_drone_classes)
    return scores_from_confusions(confs), confs


# ---------------------------------------------------------------------------
# run


@dataclass
class Environment:
    world: WorldConfig
    source: Dataset
    clients: list[ClientDataset]
    test: Dataset
    source_test: Dataset


def build_environment(cfg: RunConfig) -> Environment:
    world = cfg.world_config()
    src_specs = domain_specs(world, "source")
    tgt_specs = domain_specs(world, "target")
    source = gen_source(src_specs, cfg.n_source_per_agent, cfg.seed, world)
    scen = scenario_config(cfg.scenario, cfg.seed)
    clients = gen_target(tgt_specs, scen, cfg.seed, world)
    sizes = {Agent.CAR: cfg.test_car, Agent.DRONE: cfg.test_drone}
    test = gen_test(tgt_specs, sizes, cfg.seed, world)
    source_test = gen_test(src_specs, sizes, cfg.seed + 7919, world, id_offset=3_000_000)
    return Environment(world, source, clients, test, source_test)


@dataclass
class RunResult:
    ledger: Ledger
    state: GlobalState
    records: list[RoundRecord] = field(default_factory=list)


def _client_task(args):
    cid, state_update, data, teacher, cfg, clf, round_ = args
    rng = np.random.default_rng([cfg.seed, 13, round_, cid])
    return local_round(state_update, data, teacher, cfg, clf, rng, round_)


def run_round(state: GlobalState, plan: RoundPlan, clients: list[ClientDataset], cfg: RunConfig,
              pool: ThreadPoolExecutor | None = None) -> tuple[list[ClientUpdate], list[int], list[str]]:
    """Dispatch one round's local training; failed clients are reported, not raised."""
    teacher = state.model
    jobs = []
    for cid in plan.participants:
        start = ClientUpdate(state.model, state.protos, state.gamma, 0, cid)
        jobs.append((cid, start, clients[cid], teacher, cfg, state.weather_clf, plan.round))

    def safe(job):
        try:
            return _client_task(job)
        except ClientFailure as exc:
            return exc

    results = list(pool.map(safe, jobs)) if pool else [safe(j) for j in jobs]
    updates, failed, notes = [], [], []
    for cid, res in zip(plan.participants, results):
        if isinstance(res, ClientFailure):
            failed.append(cid)
            notes.append(str(res))
            logger.warning("%s", res)
        else:
            updates.append(res)
    return updates, failed, notes


def server_step(state: GlobalState, updates: list[ClientUpdate], cfg: RunConfig) -> None:
    """Apply the three aggregations in place; an empty round leaves the state untouched."""
    if not updates:
        return
    model = aggregate_models(updates, state, cfg.fedavg_weighted, push=False)
    hyperbolic = cfg.geometry == "hyperbolic"
    gamma = aggregate_curvature(updates) if hyperbolic else state.gamma
    protos = aggregate_prototypes(updates, state, cfg.beta_prime, gamma if hyperbolic else None)
    model["curvature"] = np.array([gamma.gamma])
    state.model = model
    state.gamma = gamma
    state.protos = protos
    if state.queue.maxlen:
        state.queue.append(model.copy())


def run(cfg: RunConfig, out_dir: str | Path, checkpoint: str | Path | None = None,
        env: Environment | None = None) -> RunResult:
    """Pretrain (or load ``checkpoint``), then ``cfg.rounds`` adaptation rounds, ledger in ``out_dir``."""
    out_dir = Path(out_dir)
    env = env or build_environment(cfg)
    ledger = Ledger(out_dir, config_header(cfg))
    t0 = time.perf_counter()

    if checkpoint is not None:
        ck = load_checkpoint(checkpoint)
        params, clf = ck.params, ck.weather_clf
        if "protos" in ck.extra:
            protos = PrototypeSet(ck.extra["protos"].copy(), np.zeros(len(ck.extra["protos"]), int),
                                  ck.extra["protos_present"].astype(bool).copy())
        else:
            protos = initial_prototypes(params, env.source, cfg)
        ledger.note("pretrain", source="checkpoint", path=str(checkpoint))
    else:
        params, clf = pretrain(env.source, cfg, clf_channels=env.world.cue_channels)
        protos = initial_prototypes(params, env.source, cfg)
        ledger.note("pretrain", source="trained", samples=len(env.source))

    gamma = Curvature(params.gamma if params.gamma > 0 else cfg.gamma_init)
    state = GlobalState.start(params, protos, gamma, cfg.effective_queue, clf)
    metrics, confs = evaluate(params, clf, env.test, cfg, env.world)
    rec0 = RoundRecord(round=0, participants=[], gamma=gamma.gamma, metrics=metrics,
                       confusions={k: v.tolist() for k, v in confs.items()},
                       notes=["source-only evaluation"], wall_time=time.perf_counter() - t0)
    ledger.append(rec0)
    records = [rec0]

    server_rng = np.random.default_rng([cfg.seed, 11])
    ids = list(range(len(env.clients)))
    # training code only ever sees clients without ground truth
    clients = [c.stripped() for c in env.clients]
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for r in range(1, cfg.rounds + 1):
            t_round = time.perf_counter()
            plan = sample_clients(ids, cfg.clients_per_round, server_rng, r)
            updates, failed, notes = run_round(state, plan, clients, cfg, pool)
            if updates:
                server_step(state, updates, cfg)
            else:
                notes.append("no valid client update; round skipped")
            state.round = r
            metrics, confs = {}, {}
            if r % cfg.eval_every == 0 or r == cfg.rounds:
                metrics, confs = evaluate(state.model, clf, env.test, cfg, env.world)
            rec = RoundRecord(
                round=r, participants=list(plan.participants),
                losses={str(u.client_id): {"st": u.loss_st, "cl": u.loss_cl} for u in updates},
                gamma=state.gamma.gamma, metrics=metrics,
                confusions={k: v.tolist() for k, v in confs.items()},
                failed=failed, notes=notes, wall_time=time.perf_counter() - t_round)
            ledger.append(rec)
            records.append(rec)
            if cfg.save_checkpoints:
                save_checkpoint(out_dir / "checkpoints" / f"round_{r:04d}.npz", state.model, clf,
                                extra={"protos": state.protos.protos, "protos_present": state.protos.present},
                                meta={"round": r})
    finally:
        if pool:
            pool.shutdown()
    save_checkpoint(out_dir / "final.npz", state.model, clf,
                    extra={"protos": state.protos.protos, "protos_present": state.protos.present},
                    meta={"round": state.round})
    return RunResult(ledger, state, records)
