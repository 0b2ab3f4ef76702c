"""Local unsupervised adaptation on one client."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import hypgeom as hg
from .config import RunConfig
from .data import ClientDataset
from .hypgeom import Curvature
from .model import (
    WEATHERS,
    LossSpec,
    ParamVector,
    TrainingError,
    Weather,
    WeatherClassifier,
    classify_weather,
    forward,
    loss_and_grad,
    majority_weather,
    sgd_step,
)

logger = logging.getLogger(__name__)


class ClientFailure(RuntimeError):
    def __init__(self, client_id: int, message: str):
        super().__init__(f"client {client_id}: {message}")
        self.client_id = client_id


@dataclass
class PrototypeSet:
    """Per-class prototypes; ``present[c]`` says whether ``protos[c]`` holds one."""

    protos: np.ndarray
    counts: np.ndarray
    present: np.ndarray
    round: int = 0
    step: int = 0

    @classmethod
    def empty(cls, n_classes: int, dim: int) -> "PrototypeSet":
        return cls(np.zeros((n_classes, dim)), np.zeros(n_classes, dtype=int), np.zeros(n_classes, dtype=bool))

    def copy(self) -> "PrototypeSet":
        return PrototypeSet(self.protos.copy(), self.counts.copy(), self.present.copy(), self.round, self.step)

    def fresh_round(self, round_: int) -> "PrototypeSet":
        """Same prototypes, zeroed counts: the starting point of a client round."""
        return PrototypeSet(self.protos.copy(), np.zeros_like(self.counts), self.present.copy(), round_, 0)


@dataclass
class ClientUpdate:
    params: ParamVector
    protos: PrototypeSet
    gamma: Curvature
    sample_count: int
    client_id: int = -1
    weather_counts: np.ndarray = field(default_factory=lambda: np.zeros(len(WEATHERS), dtype=int))
    loss_st: float = 0.0
    loss_cl: float = 0.0
    skipped_classes: int = 0


def class_prototype(feats: np.ndarray, c: Curvature, geometry: str) -> np.ndarray:
    if geometry == "euclidean":
        return feats.mean(axis=0)
    return hg.hyperbolic_midpoint(feats, c)


def embed(features: np.ndarray, c: Curvature, geometry: str, variant: str) -> np.ndarray:
    return features if geometry == "euclidean" else hg.euclid_to_hyp(features, c, variant)


def pseudo_label(teacher: ParamVector, batch: np.ndarray, weather: Weather | int) -> np.ndarray:
    """Teacher argmax per cell; the teacher is evaluated and never modified."""
    return forward(teacher, batch, weather, "eval")[1].argmax(axis=-1)


def clustering_loss_and_grad(features, pseudo_labels, protos: PrototypeSet, c: Curvature,
                             geometry: str = "hyperbolic", variant: str = "vnorm"):
    """Mean over active classes of the mean feature-to-prototype distance.

    Returns ``(loss, d loss / d features, d loss / d gamma, skipped)`` where
    ``skipped`` counts active classes that had no prototype to pull towards.
    """
    f = np.asarray(features, dtype=float).reshape(-1, protos.protos.shape[1])
    y = np.asarray(pseudo_labels).reshape(-1)
    active = np.unique(y)
    usable = [k for k in active if protos.present[k]]
    skipped = len(active) - len(usable)
    grad_f = np.zeros_like(f)
    if not usable:
        return 0.0, grad_f, 0.0, skipped

    weights = np.zeros(len(f))
    for k in usable:
        m = y == k
        weights[m] = 1.0 / (len(usable) * m.sum())
    rows = weights > 0
    targets = protos.protos[y[rows]]
    if geometry == "euclidean":
        diff = f[rows] - targets
        d = np.sqrt(np.sum(diff * diff, axis=1))
        loss = float(np.sum(weights[rows] * d))
        grad_f[rows] = weights[rows, None] * diff / np.maximum(d, hg.EPS)[:, None]
        return loss, grad_f, 0.0, skipped

    gamma = c.gamma
    fh = hg.euclid_to_hyp(f[rows], gamma, variant)
    p = hg.project(targets, gamma)
    d = hg.distance(fh, p, gamma)
    loss = float(np.sum(weights[rows] * d))
    g_fh, _, g_gamma_d = hg.distance_vjp(fh, p, gamma, weights[rows])
    g_f, g_gamma_e = hg.euclid_to_hyp_vjp(f[rows], gamma, g_fh, variant)
    grad_f[rows] = g_f
    return loss, grad_f, g_gamma_d + g_gamma_e, skipped


def clustering_loss(features, pseudo_labels, protos: PrototypeSet, c: Curvature,
                    geometry: str = "hyperbolic", variant: str = "vnorm") -> float:
    return clustering_loss_and_grad(features, pseudo_labels, protos, c, geometry, variant)[0]


def ema_update(prev: np.ndarray, raw: np.ndarray, beta: float, c: Curvature | None = None,
               mode: str = "coordinate") -> np.ndarray:
    """``beta * prev + (1 - beta) * raw``; ``geodesic`` walks along the ball geodesic instead."""
    if mode == "geodesic" and c is not None:
        step = hg.mobius_add(-prev, raw, c)
        return hg.mobius_add(prev, hg.mobius_scalar_mul(1.0 - beta, step, c), c)
    out = beta * prev + (1.0 - beta) * raw
    return hg.project(out, c) if c is not None else out


def update_curvature(gamma: Curvature, grad: float, lr: float) -> Curvature:
    return hg.update_curvature(gamma, grad, lr)


def _weather_batches(preds: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches, each drawn from a single predicted-weather group."""
    batches = []
    for w in WEATHERS:
        idx = np.flatnonzero(preds == w)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        batches.extend(idx[i:i + batch_size] for i in range(0, idx.size, batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def local_round(state: ClientUpdate, data: ClientDataset, teacher: ParamVector, cfg: RunConfig,
                weather_clf: WeatherClassifier | None, rng: np.random.Generator, round_: int = 0) -> ClientUpdate:
    """Self-training plus prototype clustering for ``cfg.local_epochs`` epochs.

    ``state`` carries what the server sent (model, global prototypes, curvature);
    ``teacher`` is the round-start global model.  Only ``data.samples`` is read.
    """
    params = state.params.copy()
    gamma = state.gamma
    protos = state.protos.fresh_round(round_)
    geometry, variant = cfg.geometry, cfg.exp_map
    hyperbolic = geometry == "hyperbolic"
    lam = cfg.effective_lambda

    x = data.samples
    if cfg.weather_bn and weather_clf is not None:
        preds = classify_weather(weather_clf, x)
    else:
        preds = np.zeros(len(x), dtype=int)
    weather_counts = np.zeros(len(WEATHERS), dtype=int)
    st_losses, cl_losses, skipped = [], [], 0

    for _ in range(cfg.local_epochs):
        for idx in _weather_batches(preds, cfg.batch_size, rng):
            xb = x[idx]
            w = majority_weather(preds[idx])
            labels = pseudo_label(teacher, xb, w)
            flat_labels = labels.reshape(-1)
            skipped_here = 0

            def feature_loss(f, protos=protos, gamma=gamma):
                nonlocal skipped_here
                val, gf, gg, skipped_here = clustering_loss_and_grad(f, flat_labels, protos, gamma, geometry, variant)
                return val, gf, gg

            try:
                lv, grad = loss_and_grad(params, xb, w, LossSpec(labels, feature_loss, lam), update_stats=True,
                                         momentum=cfg.bn_momentum)
            except (TrainingError, hg.NumericalDomainError) as exc:
                raise ClientFailure(data.client_id, f"round {round_}, step {protos.step}: {exc}") from exc
            sgd_step(params, grad, cfg.lr_client)
            if hyperbolic and lam:
                gamma = update_curvature(gamma, float(grad["curvature"][0]), cfg.lr_gamma)
            skipped += skipped_here

            # prototype smoothing with this step's class midpoints
            feats = embed(lv.features, gamma, geometry, variant)
            c_arg = gamma if hyperbolic else None
            for k in np.unique(flat_labels):
                members = feats[flat_labels == k]
                raw = class_prototype(members, gamma, geometry)
                if protos.present[k]:
                    protos.protos[k] = ema_update(protos.protos[k], raw, cfg.beta, c_arg, cfg.proto_ema)
                else:
                    protos.protos[k] = raw
                    protos.present[k] = True
                protos.counts[k] += len(members)
            if hyperbolic:
                protos.protos = hg.project(protos.protos, gamma)
            protos.step += 1
            weather_counts[w] += len(idx)
            st_losses.append(lv.ce)
            cl_losses.append(lv.feature)

    params["curvature"] = np.array([gamma.gamma])
    params.sample_count = len(x)
    return ClientUpdate(
        params=params, protos=protos, gamma=gamma, sample_count=len(x), client_id=data.client_id,
        weather_counts=weather_counts,
        loss_st=float(np.mean(st_losses)) if st_losses else 0.0,
        loss_cl=float(np.mean(cl_losses)) if cl_losses else 0.0,
        skipped_classes=skipped,
    )
