"""Segmentation scores and the append-only run ledger."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

LEDGER_SCHEMA = "fedhyp.ledger/1"
CSV_COLUMNS = ("round", "car_miou", "drone_miou", "all", "clear", "night", "rain", "fog")


def confusion(preds: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    """``conf[true, pred]`` counts."""
    p = np.asarray(preds).ravel().astype(int)
    t = np.asarray(labels).ravel().astype(int)
    if p.shape != t.shape:
        raise ValueError("preds and labels differ in length")
    for name, arr in (("label", t), ("prediction", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} out of range [0, {n_classes})")
    return np.bincount(t * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def per_class_iou(conf: np.ndarray) -> np.ndarray:
    """IoU per class; NaN for classes absent from both predictions and labels."""
    conf = np.asarray(conf, dtype=float)
    if conf.ndim != 2 or conf.shape[0] != conf.shape[1]:
        raise ValueError("confusion matrix must be square")
    tp = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)


def miou(conf: np.ndarray) -> float:
    """Mean IoU over present classes, NaN when no class is present."""
    iou = per_class_iou(conf)
    return float(np.nanmean(iou)) if np.any(~np.isnan(iou)) else math.nan


def class_remap(preds: np.ndarray, mapping: Mapping[int, int]) -> np.ndarray:
    p = np.asarray(preds)
    missing = set(np.unique(p).tolist()) - set(mapping)
    if missing:
        raise ValueError(f"class_remap: no mapping for classes {sorted(missing)}")
    lut = np.zeros(max(mapping) + 1, dtype=int)
    for k, v in mapping.items():
        lut[k] = v
    return lut[p]


def combined_score(car_conf: np.ndarray, drone_conf: np.ndarray, class_map: Mapping[int, int]) -> float:
    """Mean over car classes of per-class IoU, averaging car and drone IoU where the class is shared.

    ``class_map`` maps drone class index -> car class index.
    """
    car = per_class_iou(car_conf)
    drone = per_class_iou(drone_conf) if drone_conf is not None and np.size(drone_conf) else np.array([])
    if any(not 0 <= c < len(car) for c in class_map.values()) or any(not 0 <= d < len(drone) for d in class_map):
        raise ValueError("combined_score: class map refers to classes outside the confusion matrices")
    if len(set(class_map.values())) != len(class_map):
        raise ValueError("combined_score: class map is not injective")
    scores = car.copy()
    for d, c in class_map.items():
        pair = [v for v in (car[c], drone[d]) if not np.isnan(v)]
        scores[c] = np.mean(pair) if pair else np.nan
    return float(np.nanmean(scores)) if np.any(~np.isnan(scores)) else math.nan


# ---------------------------------------------------------------------------
# ledger


@dataclass
class RoundRecord:
    round: int
    participants: list[int]
    losses: dict[str, dict[str, float]] = field(default_factory=dict)
    gamma: float | None = None
    metrics: dict[str, float] = field(default_factory=dict)
    confusions: dict[str, list] = field(default_factory=dict)
    failed: list[int] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    wall_time: float = 0.0


def _clean(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        return _clean(x.item())
    return x


class Ledger:
    """Append-only ``ledger.jsonl`` + ``metrics.csv`` under a run directory.

    Wall-clock times go to ``timings.csv`` so the ledger itself stays bit-reproducible.
    """

    def __init__(self, run_dir: str | Path, config: dict):
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.path = self.dir / "ledger.jsonl"
        self.csv_path = self.dir / "metrics.csv"
        self.timings_path = self.dir / "timings.csv"
        self.records: list[RoundRecord] = []
        header = {"schema": LEDGER_SCHEMA, "type": "config", "config": _clean(config)}
        self.path.write_text(json.dumps(header, sort_keys=True) + "\n")
        with open(self.csv_path, "w", newline="") as fh:
            csv.writer(fh).writerow(CSV_COLUMNS)
        self.timings_path.write_text("round,wall_time\n")

    def append(self, rec: RoundRecord) -> None:
        if self.records and rec.round <= self.records[-1].round:
            raise ValueError(f"ledger rounds must increase: {rec.round} after {self.records[-1].round}")
        self.records.append(rec)
        body = asdict(rec)
        body.pop("wall_time")
        with open(self.path, "a") as fh:
            fh.write(json.dumps({"type": "round", **_clean(body)}, sort_keys=True) + "\n")
        if rec.metrics:
            m = rec.metrics
            with open(self.csv_path, "a", newline="") as fh:
                csv.writer(fh).writerow([rec.round] + [_fmt(m.get(k)) for k in CSV_COLUMNS[1:]])
        with open(self.timings_path, "a") as fh:
            fh.write(f"{rec.round},{rec.wall_time:.6f}\n")

    def note(self, kind: str, **payload) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps({"type": kind, **_clean(payload)}, sort_keys=True) + "\n")


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def read_ledger(path: str | Path) -> tuple[dict, list[dict]]:
    lines = [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]
    if not lines or lines[0].get("schema") != LEDGER_SCHEMA:
        raise ValueError(f"{path}: not a {LEDGER_SCHEMA} ledger")
    return lines[0]["config"], lines[1:]
