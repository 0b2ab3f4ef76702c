"""Tiny segmentation network with per-weather batch-norm banks.

Layout: ``x -> W1 -> BN -> relu -> W2 -> BN -> relu = features -> Wh + bh = logits``.
All cells of all images in a batch are normalized together.  Gradients are
hand-written; ``tests/test_model.py`` checks them against central differences.
"""

from __future__ import annotations

import enum
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_FORMAT = "fedhyp.params/1"
BN_EPS = 1e-5


class Weather(enum.IntEnum):
    CLEAR = 0
    NIGHT = 1
    RAIN = 2
    FOG = 3

    @property
    def label(self) -> str:
        return self.name.lower()


WEATHERS = tuple(Weather)


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Non-finite loss or gradient during training."""


@dataclass(frozen=True)
class ModelShape:
    in_dim: int = 8
    hidden: tuple[int, int] = (32, 16)
    n_classes: int = 6

    @property
    def feature_dim(self) -> int:
        return self.hidden[1]


@dataclass
class BatchNormState:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1


def bank_key(weather: Weather | int, layer: int, name: str) -> str:
    return f"bn.{Weather(weather).label}.{layer}.{name}"


BN_FIELDS = ("scale", "shift", "mean", "var")
TRAINABLE_BN = ("scale", "shift")


@dataclass
class ParamVector:
    """Named segments of float arrays plus the number of samples they were trained on."""

    segments: dict[str, np.ndarray]
    sample_count: int = 0

    def copy(self) -> "ParamVector":
        return ParamVector({k: v.copy() for k, v in self.segments.items()}, self.sample_count)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.segments[key]

    def __setitem__(self, key: str, value: np.ndarray) -> None:
        self.segments[key] = value

    def keys(self):
        return self.segments.keys()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.segments.items()}

    def check_compatible(self, other: "ParamVector") -> None:
        if self.shapes() != other.shapes():
            raise ShapeError("ParamVectors have different segment layouts")

    def zeros_like(self) -> "ParamVector":
        return ParamVector({k: np.zeros_like(v) for k, v in self.segments.items()})

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self.check_compatible(other)
        return ParamVector({k: v + other.segments[k] for k, v in self.segments.items()})

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self.check_compatible(other)
        return ParamVector({k: v - other.segments[k] for k, v in self.segments.items()})

    def __mul__(self, s: float) -> "ParamVector":
        return ParamVector({k: v * s for k, v in self.segments.items()})

    __rmul__ = __mul__

    def equal(self, other: "ParamVector", keys: Iterable[str] | None = None) -> bool:
        keys = self.keys() if keys is None else keys
        return all(np.array_equal(self.segments[k], other.segments[k]) for k in keys)

    def bank(self, weather: Weather | int, layer: int, momentum: float = 0.1) -> BatchNormState:
        return BatchNormState(*(self.segments[bank_key(weather, layer, f)] for f in BN_FIELDS), momentum)

    def bank_keys(self, weather: Weather | int) -> list[str]:
        prefix = f"bn.{Weather(weather).label}."
        return [k for k in self.segments if k.startswith(prefix)]

    def shared_keys(self) -> list[str]:
        return [k for k in self.segments if not k.startswith("bn.") and k != "curvature"]

    @property
    def gamma(self) -> float:
        return float(self.segments["curvature"][0])

    def flat(self) -> np.ndarray:
        return np.concatenate([self.segments[k].ravel() for k in sorted(self.segments)])


def linear_combination(vectors: Sequence[ParamVector], coeffs: Sequence[float], keys: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Segment-wise ``sum_i c_i v_i`` over ``keys`` (default: all)."""
    if not vectors:
        raise ValueError("linear_combination of no vectors")
    first = vectors[0]
    for v in vectors[1:]:
        first.check_compatible(v)
    keys = list(first.keys()) if keys is None else list(keys)
    out = {}
    for k in keys:
        acc = np.zeros_like(first.segments[k])
        for v, c in zip(vectors, coeffs):
            acc = acc + c * v.segments[k]
        out[k] = acc
    return out


def init_params(shape: ModelShape, rng: np.random.Generator, gamma: float = 0.1) -> ParamVector:
    h1, h2 = shape.hidden
    seg = {
        "encoder.w1": rng.normal(0.0, np.sqrt(2.0 / shape.in_dim), (shape.in_dim, h1)),
        "encoder.w2": rng.normal(0.0, np.sqrt(2.0 / h1), (h1, h2)),
        "head.w": rng.normal(0.0, np.sqrt(1.0 / h2), (h2, shape.n_classes)),
        "head.b": np.zeros(shape.n_classes),
        "curvature": np.array([gamma], dtype=float),
    }
    for w in WEATHERS:
        for layer, width in enumerate((h1, h2)):
            seg[bank_key(w, layer, "scale")] = np.ones(width)
            seg[bank_key(w, layer, "shift")] = np.zeros(width)
            seg[bank_key(w, layer, "mean")] = np.zeros(width)
            seg[bank_key(w, layer, "var")] = np.ones(width)
    return ParamVector(seg)


def inherit_banks(params: ParamVector, source: Weather = Weather.CLEAR) -> ParamVector:
    """Copy one bank into all four (every bank starts from the global statistics)."""
    out = params.copy()
    for w in WEATHERS:
        for k in params.bank_keys(source):
            out[k.replace(f"bn.{source.label}.", f"bn.{w.label}.", 1)] = params[k].copy()
    return out


def trainable_keys(params: ParamVector) -> list[str]:
    return [k for k in params.keys() if k.startswith(("encoder.", "head.")) or k.endswith(TRAINABLE_BN)]


# ---------------------------------------------------------------------------
# forward / backward


def _flatten(batch: np.ndarray, in_dim: int) -> tuple[np.ndarray, tuple[int, ...]]:
    x = np.asarray(batch, dtype=float)
    if x.ndim < 2 or x.shape[-1] != in_dim:
        raise ShapeError(f"expected batch with trailing dim {in_dim}, got shape {x.shape}")
    lead = x.shape[:-1]
    x = x.reshape(-1, in_dim)
    if x.shape[0] == 0:
        raise ShapeError("empty batch")
    return x, lead


def _bn_forward(z, params, weather, layer, train, update_stats, momentum):
    scale = params[bank_key(weather, layer, "scale")]
    shift = params[bank_key(weather, layer, "shift")]
    if train:
        mu = z.mean(axis=0)
        var = z.var(axis=0)
        if update_stats:
            n = z.shape[0]
            unbiased = var * n / max(n - 1, 1)
            mk, vk = bank_key(weather, layer, "mean"), bank_key(weather, layer, "var")
            params[mk] = (1 - momentum) * params[mk] + momentum * mu
            params[vk] = np.maximum((1 - momentum) * params[vk] + momentum * unbiased, BN_EPS)
    else:
        mu = params[bank_key(weather, layer, "mean")]
        var = params[bank_key(weather, layer, "var")]
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (z - mu) * inv
    return scale * xhat + shift, (xhat, inv, scale, train)


def _bn_backward(dy, cache):
    xhat, inv, scale, train = cache
    dscale = np.sum(dy * xhat, axis=0)
    dshift = np.sum(dy, axis=0)
    dxhat = dy * scale
    if train:
        n = dy.shape[0]
        dz = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
    else:
        dz = dxhat * inv
    return dz, dscale, dshift


def _run(params, x, weather, train, update_stats, momentum):
    z1 = x @ params["encoder.w1"]
    y1, bn1 = _bn_forward(z1, params, weather, 0, train, update_stats, momentum)
    a1 = np.maximum(y1, 0.0)
    z2 = a1 @ params["encoder.w2"]
    y2, bn2 = _bn_forward(z2, params, weather, 1, train, update_stats, momentum)
    f = np.maximum(y2, 0.0)
    logits = f @ params["head.w"] + params["head.b"]
    return f, logits, dict(x=x, y1=y1, a1=a1, y2=y2, f=f, bn1=bn1, bn2=bn2)


def forward(params: ParamVector, batch: np.ndarray, weather: Weather | int, mode: str = "eval",
            momentum: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(features, logits)`` with the batch's leading shape preserved.

    In ``train`` mode the batch statistics normalize and the running statistics of
    ``weather``'s bank (only) are updated in place.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    in_dim = params["encoder.w1"].shape[0]
    x, lead = _flatten(batch, in_dim)
    train = mode == "train"
    f, logits, _ = _run(params, x, Weather(weather), train, train, momentum)
    return f.reshape(*lead, -1), logits.reshape(*lead, -1)


FeatureLoss = Callable[[np.ndarray], tuple[float, np.ndarray, float]]


@dataclass
class LossSpec:
    """What to optimize: cross-entropy on ``targets`` plus ``weight * feature_loss``.

    ``targets`` are class ids (one per cell) or soft target rows.  ``feature_loss``
    maps the (N, d) feature matrix to ``(value, d value / d features, d value / d gamma)``.
    """

    targets: np.ndarray
    feature_loss: FeatureLoss | None = None
    weight: float = 0.0
    mode: str = "train"


@dataclass
class LossValues:
    total: float
    ce: float
    feature: float = 0.0
    features: np.ndarray | None = field(default=None, repr=False)


def _cross_entropy(logits, targets):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    n = logits.shape[0]
    t = np.asarray(targets)
    if t.ndim == 1:
        loss = -np.mean(logp[np.arange(n), t.astype(int)])
        onehot = np.zeros_like(p)
        onehot[np.arange(n), t.astype(int)] = 1.0
    else:
        loss = -np.mean(np.sum(t * logp, axis=1))
        onehot = t
    return float(loss), (p - onehot) / n


def loss_and_grad(params: ParamVector, batch: np.ndarray, weather: Weather | int, spec: LossSpec,
                  update_stats: bool = False, momentum: float = 0.1) -> tuple[LossValues, ParamVector]:
    """Forward + manual backward.

    Only the encoder, head, the selected bank's affine parameters and the
    curvature receive gradient; every other segment of the result is zero.
    """
    in_dim = params["encoder.w1"].shape[0]
    x, _ = _flatten(batch, in_dim)
    weather = Weather(weather)
    train = spec.mode == "train"
    f, logits, c = _run(params, x, weather, train, update_stats and train, momentum)
    targets = np.asarray(spec.targets)
    soft = np.issubdtype(targets.dtype, np.floating)
    targets = targets.reshape(-1, logits.shape[1]) if soft else targets.reshape(-1)
    if targets.shape[0] != x.shape[0]:
        raise ShapeError("targets do not match the number of cells")

    ce, dlogits = _cross_entropy(logits, targets)
    feat_val, dfeat_extra, dgamma = 0.0, None, 0.0
    if spec.feature_loss is not None and spec.weight != 0.0:
        feat_val, dfeat_extra, dgamma = spec.feature_loss(f)
    total = ce + spec.weight * feat_val
    if not np.isfinite(total):
        raise TrainingError(f"non-finite loss (ce={ce}, feature={feat_val})")

    grad = params.zeros_like()
    grad["head.w"] = f.T @ dlogits
    grad["head.b"] = dlogits.sum(axis=0)
    df = dlogits @ params["head.w"].T
    if dfeat_extra is not None:
        df = df + spec.weight * dfeat_extra
        grad["curvature"] = np.array([spec.weight * dgamma])
    dy2 = df * (c["y2"] > 0)
    dz2, ds2, db2 = _bn_backward(dy2, c["bn2"])
    grad[bank_key(weather, 1, "scale")] = ds2
    grad[bank_key(weather, 1, "shift")] = db2
    grad["encoder.w2"] = c["a1"].T @ dz2
    da1 = dz2 @ params["encoder.w2"].T
    dy1 = da1 * (c["y1"] > 0)
    dz1, ds1, db1 = _bn_backward(dy1, c["bn1"])
    grad[bank_key(weather, 0, "scale")] = ds1
    grad[bank_key(weather, 0, "shift")] = db1
    grad["encoder.w1"] = x.T @ dz1

    for k, v in grad.segments.items():
        if not np.all(np.isfinite(v)):
            raise TrainingError(f"non-finite gradient in segment {k}")
    return LossValues(float(total), ce, float(feat_val), f), grad


def backward(params: ParamVector, batch: np.ndarray, weather: Weather | int, loss_spec: LossSpec) -> ParamVector:
    return loss_and_grad(params, batch, weather, loss_spec)[1]


def sgd_step(params: ParamVector, grad: ParamVector, lr: float, velocity: dict | None = None,
             momentum: float = 0.0) -> None:
    """In-place SGD (optionally with momentum) on trainable segments; curvature is untouched."""
    for k in trainable_keys(params):
        g = grad[k]
        if velocity is not None and momentum:
            v = velocity.get(k)
            v = g.copy() if v is None else momentum * v + g
            velocity[k] = v
            g = v
        params[k] = params[k] - lr * g


def predict(params: ParamVector, batch: np.ndarray, weather: Weather | int) -> np.ndarray:
    return forward(params, batch, weather, "eval")[1].argmax(axis=-1)


# ---------------------------------------------------------------------------
# weather classifier


def image_summary(images: np.ndarray, channels=None) -> np.ndarray:
    """Per-image descriptor: per-channel mean and std over all cells."""
    x = np.asarray(images, dtype=float)
    if channels is not None:
        x = x[..., np.asarray(channels, dtype=int)]
    flat = x.reshape(x.shape[0], -1, x.shape[-1])
    return np.concatenate([flat.mean(axis=1), flat.std(axis=1)], axis=1)


@dataclass
class WeatherClassifier:
    params: dict[str, np.ndarray]
    frozen: bool = False

    def logits(self, images: np.ndarray) -> np.ndarray:
        p = self.params
        s = (image_summary(images, p.get("channels")) - p["norm.mean"]) / p["norm.std"]
        h = np.maximum(s @ p["w1"] + p["b1"], 0.0)
        return h @ p["w2"] + p["b2"]


def classify_weather(clf: WeatherClassifier, batch: np.ndarray) -> np.ndarray:
    """Predicted Weather id for each image in ``batch`` (B, ..., in_dim)."""
    return clf.logits(batch).argmax(axis=1)


def majority_weather(preds: np.ndarray) -> Weather:
    """Per-batch vote; ties go to the lowest enum value."""
    counts = np.bincount(np.asarray(preds, dtype=int), minlength=len(WEATHERS))
    return Weather(int(np.argmax(counts)))


def fit_weather_classifier(images: np.ndarray, weathers: np.ndarray, rng: np.random.Generator, hidden: int = 16,
                           epochs: int = 8, batch_size: int = 88, lr: float = 0.05, momentum: float = 0.9,
                           channels=None) -> WeatherClassifier:
    """Small MLP on image summaries; ``channels`` restricts it to a subset of input channels."""
    s = image_summary(images, channels)
    mean, std = s.mean(axis=0), s.std(axis=0) + 1e-8
    s = (s - mean) / std
    d = s.shape[1]
    p = {
        "w1": rng.normal(0, np.sqrt(2.0 / d), (d, hidden)), "b1": np.zeros(hidden),
        "w2": rng.normal(0, np.sqrt(1.0 / hidden), (hidden, len(WEATHERS))), "b2": np.zeros(len(WEATHERS)),
    }
    vel = {k: np.zeros_like(v) for k, v in p.items()}
    y = np.asarray(weathers, dtype=int)
    for _ in range(epochs):
        order = rng.permutation(len(s))
        for start in range(0, len(s), batch_size):
            idx = order[start:start + batch_size]
            xb = s[idx]
            h_pre = xb @ p["w1"] + p["b1"]
            h = np.maximum(h_pre, 0.0)
            _, dlog = _cross_entropy(h @ p["w2"] + p["b2"], y[idx])
            g = {"w2": h.T @ dlog, "b2": dlog.sum(axis=0)}
            dh = (dlog @ p["w2"].T) * (h_pre > 0)
            g["w1"] = xb.T @ dh
            g["b1"] = dh.sum(axis=0)
            for k in p:
                vel[k] = momentum * vel[k] + g[k]
                p[k] = p[k] - lr * vel[k]
    p["norm.mean"], p["norm.std"] = mean, std
    if channels is not None:
        p["channels"] = np.asarray(channels, dtype=int)
    return WeatherClassifier(p, frozen=True)


# ---------------------------------------------------------------------------
# checkpoints


def write_npz(path: str | Path, arrays: dict[str, np.ndarray]) -> Path:
    """``np.savez`` equivalent with fixed entry timestamps and order, so equal arrays give equal bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(arrays[name]), allow_pickle=False)
    path.write_bytes(buf.getvalue())
    return path


def _pack(arrays: dict[str, np.ndarray], meta: dict) -> dict[str, np.ndarray]:
    manifest = {"format": CHECKPOINT_FORMAT, "meta": meta,
                "segments": {k: [list(v.shape), str(v.dtype)] for k, v in sorted(arrays.items())}}
    out = {f"seg/{k}": np.ascontiguousarray(v) for k, v in arrays.items()}
    out["__manifest__"] = np.array(json.dumps(manifest, sort_keys=True))
    return out


def _unpack(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        manifest = json.loads(str(z["__manifest__"]))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
        arrays = {k: z[f"seg/{k}"] for k in manifest["segments"]}
    for k, (shape, dtype) in manifest["segments"].items():
        if list(arrays[k].shape) != shape or str(arrays[k].dtype) != dtype:
            raise ValueError(f"{path}: segment {k} does not match its manifest entry")
    return arrays, manifest["meta"]


def save_checkpoint(path: str | Path, params: ParamVector, clf: WeatherClassifier | None = None,
                    extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> Path:
    """Write params (+ optional classifier and extra arrays) to a versioned ``.npz``."""
    arrays = {f"params/{k}": v for k, v in params.segments.items()}
    if clf is not None:
        arrays.update({f"weather_clf/{k}": v for k, v in clf.params.items()})
    for k, v in (extra or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v)
    meta = dict(meta or {}, sample_count=params.sample_count)
    return write_npz(path, _pack(arrays, meta))


@dataclass
class Checkpoint:
    params: ParamVector
    weather_clf: WeatherClassifier | None = None
    extra: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def load_checkpoint(path: str | Path) -> Checkpoint:
    arrays, meta = _unpack(Path(path))
    params = {k[len("params/"):]: v for k, v in arrays.items() if k.startswith("params/")}
    clf = {k[len("weather_clf/"):]: v for k, v in arrays.items() if k.startswith("weather_clf/")}
    extra = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return Checkpoint(ParamVector(params, int(meta.get("sample_count", 0))),
                      WeatherClassifier(clf, frozen=True) if clf else None, extra, meta)
