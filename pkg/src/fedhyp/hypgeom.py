"""Poincare-ball operations with closed-form gradients.

Every function works on arrays of shape ``(..., n)`` where the last axis holds
point coordinates; batch axes broadcast.  The curvature magnitude ``gamma`` is
a plain positive float (the ball has curvature ``-gamma`` and radius
``1/sqrt(gamma)``).

Gradient helpers follow a VJP convention: ``*_vjp(..., grad_out)`` returns the
gradient of ``sum(grad_out * op(...))`` with respect to each input, the
curvature gradient summed over the batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)

EPS = 1e-12
BALL_MARGIN = 1e-7
GAMMA_FLOOR = 1e-4
EXP_VARIANTS = ("vnorm", "conformal")


class NumericalDomainError(ArithmeticError):
    """Raised when an operation hits a degenerate denominator."""


@dataclass(frozen=True)
class Curvature:
    gamma: float = 0.1
    learnable: bool = True

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"curvature must be positive, got {self.gamma}")

    def step(self, grad: float, lr: float) -> "Curvature":
        return update_curvature(self, grad, lr)


def update_curvature(c: Curvature, grad: float, lr: float, floor: float = GAMMA_FLOOR) -> Curvature:
    """One SGD step on the curvature, clamped to ``floor``."""
    if not c.learnable or grad == 0.0:
        return c
    return Curvature(max(c.gamma - lr * grad, floor), c.learnable)


def _g(c) -> float:
    return float(c.gamma) if isinstance(c, Curvature) else float(c)


def _dot(a, b):
    return np.sum(a * b, axis=-1, keepdims=True)


def _sqnorm(a):
    return np.sum(a * a, axis=-1, keepdims=True)


def project(p: np.ndarray, c) -> np.ndarray:
    """Radially pull points with ``gamma*|p|^2 >= 1 - 1e-7`` back inside the ball."""
    gamma = _g(c)
    p = np.asarray(p, dtype=float)
    sq = _sqnorm(p)
    limit = 1.0 - BALL_MARGIN
    bad = gamma * sq >= limit
    if not np.any(bad):
        return p
    norm = np.sqrt(np.maximum(sq, EPS))
    target = limit / np.sqrt(gamma)
    return np.where(bad, p * (target / norm), p)


def in_ball(p: np.ndarray, c) -> np.ndarray:
    return _g(c) * _sqnorm(np.asarray(p, dtype=float))[..., 0] < 1.0


def conformal_factor(x: np.ndarray, c) -> np.ndarray:
    """lambda_x = 2 / (1 - gamma |x|^2), shape ``(..., 1)``."""
    return 2.0 / (1.0 - _g(c) * _sqnorm(x))


# ---------------------------------------------------------------------------
# Mobius addition


def _mobius_parts(x, y, gamma):
    xy = _dot(x, y)
    x2 = _sqnorm(x)
    y2 = _sqnorm(y)
    a = 1.0 + 2.0 * gamma * xy + gamma * y2
    b = 1.0 - gamma * x2
    den = 1.0 + 2.0 * gamma * xy + gamma**2 * x2 * y2
    return xy, x2, y2, a, b, den


def _mobius_raw(x, y, gamma):
    _, _, _, a, b, den = _mobius_parts(x, y, gamma)
    if np.any(np.abs(den) < EPS):
        raise NumericalDomainError("mobius_add: denominator vanished")
    return (a * x + b * y) / den


def mobius_add(x: np.ndarray, y: np.ndarray, c) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return project(_mobius_raw(x, y, _g(c)), c)


def mobius_add_vjp(x, y, c, grad_out):
    """Gradients of ``sum(grad_out * (x (+) y))`` w.r.t. ``x``, ``y`` and ``gamma``."""
    gamma = _g(c)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xy, x2, y2, a, b, den = _mobius_parts(x, y, gamma)
    num = a * x + b * y
    g_num = grad_out / den
    g_den = -_dot(grad_out, num) / den**2
    gx_num = _dot(g_num, x)
    gy_num = _dot(g_num, y)

    dx = a * g_num + 2 * gamma * gx_num * y - 2 * gamma * gy_num * x
    dx = dx + g_den * (2 * gamma * y + 2 * gamma**2 * y2 * x)
    dy = b * g_num + gx_num * (2 * gamma * x + 2 * gamma * y)
    dy = dy + g_den * (2 * gamma * x + 2 * gamma**2 * x2 * y)
    dgamma = gx_num * (2 * xy + y2) - gy_num * x2 + g_den * (2 * xy + 2 * gamma * x2 * y2)
    return dx, dy, float(np.sum(dgamma))


# ---------------------------------------------------------------------------
# Mobius scalar multiplication


def mobius_scalar_mul(r: float, x: np.ndarray, c) -> np.ndarray:
    """``r (x) x``; the origin maps to the origin (removable singularity)."""
    gamma = _g(c)
    x = np.asarray(x, dtype=float)
    n = np.sqrt(_sqnorm(x))
    sg = np.sqrt(gamma)
    t = np.clip(sg * n, 0.0, 1.0 - BALL_MARGIN)
    safe_n = np.maximum(n, EPS)
    out = np.tanh(r * np.arctanh(t)) * x / (sg * safe_n)
    out = np.where(n < EPS, 0.0, out)
    return project(out, c)


# ---------------------------------------------------------------------------
# Distance


def _artanh_clamped(t):
    limit = 1.0 - BALL_MARGIN
    if np.any(t >= limit):
        logger.warning("distance: artanh argument reached %.3g, clamped", float(np.max(t)))
        t = np.minimum(t, limit)
    return np.arctanh(t), t


def distance(x: np.ndarray, y: np.ndarray, c) -> np.ndarray:
    """Geodesic distance ``2/sqrt(g) * artanh(sqrt(g) |(-x) (+) y|)``, shape ``(...)``."""
    gamma = _g(c)
    u = _mobius_raw(-np.asarray(x, dtype=float), np.asarray(y, dtype=float), gamma)
    t = np.sqrt(gamma) * np.sqrt(_sqnorm(u))[..., 0]
    at, _ = _artanh_clamped(t)
    return 2.0 / np.sqrt(gamma) * at


def distance_vjp(x, y, c, grad_out):
    """Gradients of ``sum(grad_out * distance(x, y))`` w.r.t. ``x``, ``y``, ``gamma``."""
    gamma = _g(c)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    grad_out = np.asarray(grad_out, dtype=float)[..., None]
    u = _mobius_raw(-x, y, gamma)
    un = np.sqrt(_sqnorm(u))
    sg = np.sqrt(gamma)
    at, t = _artanh_clamped(sg * un)
    one_m = 1.0 - t * t
    g_u = grad_out * 2.0 * u / (np.maximum(un, EPS) * one_m)
    g_gamma_direct = grad_out * (-at / gamma**1.5 + un / (gamma * one_m))
    dmx, dy, dgamma = mobius_add_vjp(-x, y, gamma, g_u)
    return -dmx, dy, dgamma + float(np.sum(g_gamma_direct))


# ---------------------------------------------------------------------------
# Exponential map


def _zeta(variant, vn, x, gamma):
    """tanh argument and its partials w.r.t. |v|, gamma, and x."""
    sg = np.sqrt(gamma)
    if variant == "vnorm":
        den = 1.0 - gamma * vn * vn
        den = np.where(np.abs(den) < EPS, np.where(den < 0, -EPS, EPS), den)
        z = sg * vn / den
        z_n = sg * (1.0 + gamma * vn * vn) / den**2
        z_g = vn * (1.0 + gamma * vn * vn) / (2.0 * sg * den**2)
        z_x = np.zeros_like(x)
    elif variant == "conformal":
        x2 = _sqnorm(x)
        den = 1.0 - gamma * x2
        z = sg * vn / den
        z_n = sg / den
        z_g = vn / (2.0 * sg * den) + sg * vn * x2 / den**2
        z_x = sg * vn * 2.0 * gamma * x / den**2
    else:
        raise ValueError(f"unknown exp map variant {variant!r}; expected one of {EXP_VARIANTS}")
    return z, z_n, z_g, z_x


def _exp_direction(x, v, gamma, variant):
    vn = np.sqrt(_sqnorm(v))
    safe = np.maximum(vn, EPS)
    z, _, _, _ = _zeta(variant, safe, x, gamma)
    w = np.tanh(z) * v / (np.sqrt(gamma) * safe)
    return np.where(vn < EPS, 0.0, w), vn


def exp_map(x: np.ndarray, v: np.ndarray, c, variant: str = "vnorm") -> np.ndarray:
    """Exponential map at ``x`` applied to tangent ``v``.

    ``variant="vnorm"`` uses ``tanh(sqrt(g)|v| / (1 - g|v|^2))``; ``"conformal"`` uses the
    conformal-factor form ``tanh(sqrt(g) * lambda_x * |v| / 2)``.
    """
    gamma = _g(c)
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise NumericalDomainError("exp_map: tangent vector is not finite")
    x_b = np.broadcast_to(x, np.broadcast_shapes(x.shape, v.shape))
    w, vn = _exp_direction(x_b, v, gamma, variant)
    out = project(_mobius_raw(x_b, w, gamma), c)
    return np.where(vn < EPS, x_b, out)


def exp_map_vnorm(x, v, c):
    return exp_map(x, v, c, "vnorm")


def exp_map_conformal(x, v, c):
    return exp_map(x, v, c, "conformal")


def exp_map_vjp(x, v, c, grad_out, variant: str = "vnorm"):
    """Gradients of ``sum(grad_out * exp_map(x, v))`` w.r.t. ``x``, ``v``, ``gamma``.

    The boundary projection is treated as the identity.
    """
    gamma = _g(c)
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    x = np.broadcast_to(x, np.broadcast_shapes(x.shape, v.shape))
    sg = np.sqrt(gamma)
    vn = np.sqrt(_sqnorm(v))
    safe = np.maximum(vn, EPS)
    z, z_n, z_g, z_x = _zeta(variant, safe, x, gamma)
    th = np.tanh(z)
    w = th * v / (sg * safe)
    w = np.where(vn < EPS, 0.0, w)

    gx, gw, ggamma = mobius_add_vjp(x, w, gamma, grad_out)

    # sech^2 underflows to 0 once |z| is large; keep the product finite.
    sech2 = np.where(np.abs(z) > 30.0, 0.0, 1.0 - th * th)
    s = _dot(gw, v)
    dv = th / (sg * safe) * gw + s * (sech2 * z_n / (sg * safe) - th / (sg * safe**2)) * v / safe
    dg = s / safe * (sech2 * z_g / sg - th / (2.0 * gamma * sg))
    dx_z = s / (sg * safe) * sech2 * z_x

    small = vn < EPS
    slope = 1.0 if variant == "vnorm" else 1.0 / (1.0 - gamma * _sqnorm(x))
    dv = np.where(small, gw * slope, dv)
    dg = np.where(small, 0.0, dg)
    dx_z = np.where(small, 0.0, dx_z)
    return gx + dx_z, dv, ggamma + float(np.sum(dg))


def euclid_to_hyp(f: np.ndarray, c, variant: str = "vnorm") -> np.ndarray:
    """Map Euclidean features onto the ball via the exponential map at the origin."""
    f = np.asarray(f, dtype=float)
    gamma = _g(c)
    if not np.all(np.isfinite(f)):
        raise NumericalDomainError("euclid_to_hyp: non-finite features")
    w, vn = _exp_direction(np.zeros_like(f), f, gamma, variant)
    return project(np.where(vn < EPS, 0.0, w), c)


def euclid_to_hyp_vjp(f, c, grad_out, variant: str = "vnorm"):
    """Gradients of ``sum(grad_out * euclid_to_hyp(f))`` w.r.t. ``f`` and ``gamma``."""
    f = np.asarray(f, dtype=float)
    _, dv, dg = exp_map_vjp(np.zeros_like(f), f, c, grad_out, variant)
    return dv, dg


# ---------------------------------------------------------------------------
# Midpoint


def hyperbolic_midpoint(points: np.ndarray, c, weights: np.ndarray | None = None) -> np.ndarray:
    """Gyro-midpoint ``1/2 (x) (sum w lambda f / sum w (lambda - 1))`` of ``points`` (k, n)."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("hyperbolic_midpoint needs a nonempty (k, n) array of points")
    pts = project(pts, c)
    w = np.ones(pts.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (pts.shape[0],) or np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be nonnegative, one per point, not all zero")
    lam = conformal_factor(pts, c)[:, 0]
    num = np.sum((w * lam)[:, None] * pts, axis=0)
    den = np.sum(w * (lam - 1.0))
    return mobius_scalar_mul(0.5, num / den, c)


def frechet_objective(m: np.ndarray, points: np.ndarray, c, weights=None) -> float:
    d = distance(m[None, :], points, c)
    w = np.ones(len(points)) if weights is None else np.asarray(weights, dtype=float)
    return float(np.sum(w * d * d))


# ---------------------------------------------------------------------------
# Finite-difference harness


def central_difference(fn: Callable[[np.ndarray], float], at: np.ndarray, h: float = 1e-5) -> np.ndarray:
    at = np.asarray(at, dtype=float)
    out = np.zeros_like(at)
    flat = at.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn(at)
        flat[i] = old - h
        fm = fn(at)
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return out


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.atleast_1d(np.asarray(analytic, dtype=float))
    n = np.atleast_1d(np.asarray(numeric, dtype=float))
    if not np.all(np.isfinite(a)):
        raise NumericalDomainError("analytic gradient is not finite")
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale))


def grad_check(op: str, inputs: dict, h: float = 1e-5, variant: str = "vnorm") -> float:
    """Worst relative error between analytic partials of ``op`` and central differences.

    ``op`` is one of ``distance``, ``exp_map``, ``euclid_to_hyp``.  ``inputs`` holds
    the op's arguments by name (``x``, ``y``, ``v``, ``f``, ``gamma``).  The scalar
    probed is ``sum(weights * op(...))`` with fixed random weights.
    """
    gamma = float(inputs["gamma"])
    rng = np.random.default_rng(0)

    if op == "distance":
        x, y = np.array(inputs["x"], float), np.array(inputs["y"], float)
        w = rng.uniform(0.5, 1.5, size=distance(x, y, gamma).shape)
        fn = lambda xx, yy, gg: float(np.sum(w * distance(xx, yy, gg)))
        gx, gy, gg = distance_vjp(x, y, gamma, w)
        args = {"x": (x, gx), "y": (y, gy)}
    elif op == "exp_map":
        x, v = np.array(inputs["x"], float), np.array(inputs["v"], float)
        w = rng.uniform(0.5, 1.5, size=exp_map(x, v, gamma, variant).shape)
        fn = lambda xx, vv, gg: float(np.sum(w * exp_map(xx, vv, gg, variant)))
        gx, gv, gg = exp_map_vjp(x, v, gamma, w, variant)
        args = {"x": (x, gx), "v": (v, gv)}
    elif op == "euclid_to_hyp":
        f = np.array(inputs["f"], float)
        w = rng.uniform(0.5, 1.5, size=f.shape)
        fn = lambda ff, gg: float(np.sum(w * euclid_to_hyp(ff, gg, variant)))
        gf, gg = euclid_to_hyp_vjp(f, gamma, w, variant)
        args = {"f": (f, gf)}
    else:
        raise ValueError(f"grad_check: unsupported op {op!r}")

    names = list(args)
    worst = 0.0
    for name in names:
        val, analytic = args[name]

        def partial(z, name=name):
            call = [args[k][0] if k != name else z for k in names]
            return fn(*call, gamma)

        worst = max(worst, max_relative_error(analytic, central_difference(partial, val.copy(), h)))

    def in_gamma(gv):
        return fn(*[args[k][0] for k in names], float(gv[0]))

    num_g = central_difference(in_gamma, np.array([gamma]), h)
    return max(worst, max_relative_error(gg, num_g))
