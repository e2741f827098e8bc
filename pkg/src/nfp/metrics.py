"""Similarity and distance functions between channel fibers.

Every function maps two vectors (``x`` = neighbor, ``y`` = center) to a
scalar with the convention that larger means more similar: distances are
negated. All kernels below are vectorized over leading axes and reduce over
the last axis, so the same code serves single fibers and whole feature maps.
Arithmetic is float64 throughout.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .errors import RegistryError, ShapeError, ValidationError

EPS = 1e-8
SCS_POWER = 3.0
SCS_Q = 1e-6


@dataclass(frozen=True)
class MetricDescriptor:
    id: str
    name: str
    category: int
    negated_distance: bool
    has_analytic_gradient: bool
    epsilon: float = EPS
    # operates on to_distribution(x), to_distribution(y)
    uses_distribution: bool = False
    # depends on x - y only; the fast path feeds it difference-kernel output
    difference_based: bool = False
    provisional: bool = False


@dataclass(frozen=True)
class MetricGradient:
    d_x: np.ndarray
    d_y: np.ndarray


def to_distribution(x, epsilon: float = EPS) -> np.ndarray:
    """Shift-min normalization of the last axis onto the probability simplex."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.min(axis=-1, keepdims=True) + epsilon
    return shifted / shifted.sum(axis=-1, keepdims=True)


def _norm(v):
    return np.sqrt(np.sum(v * v, axis=-1))


def _unit(v, n):
    # v / |v| with the zero vector mapped to zero
    n = n[..., None]
    return np.divide(v, n, out=np.zeros_like(v), where=n > 0)


def _dot(x, y):
    return np.sum(x * y, axis=-1)


# -- difference-based reductions (argument is x - y) -------------------------

def _l1_diff(d):
    return -np.sum(np.abs(d), axis=-1)


def _l2_diff(d):
    return -np.sqrt(np.sum(d * d, axis=-1))


def _rmse_diff(d):
    return -np.sqrt(np.mean(d * d, axis=-1))


def _gm_diff(d):
    d2 = d * d
    return -np.mean(d2 / (1.0 + d2), axis=-1)


_DIFF: dict[str, Callable] = {
    "l1": _l1_diff,
    "l2": _l2_diff,
    "rmse": _rmse_diff,
    "geman_mcclure": _gm_diff,
}


# -- value kernels -----------------------------------------------------------

def _cosine(x, y):
    return _dot(x, y) / (_norm(x) * _norm(y) + EPS)


def _scs_core(x, y):
    nx, ny = _norm(x), _norm(y)
    return _dot(x, y) / ((nx + SCS_Q) * (ny + SCS_Q))


def _scs(x, y):
    c = _scs_core(x, y)
    return np.sign(c) * np.abs(c) ** SCS_POWER


def _gfc(x, y):
    return np.abs(_dot(x, y)) / (_norm(x) * _norm(y) + EPS)


def _pearson(x, y):
    return _cosine(x - x.mean(axis=-1, keepdims=True), y - y.mean(axis=-1, keepdims=True))


def _canberra(x, y):
    return -np.sum(np.abs(x - y) / (np.abs(x) + np.abs(y) + EPS), axis=-1)


def _chi2_1(p, q):
    return -np.sum((p - q) ** 2 / (q + EPS), axis=-1)


def _chi2_2(p, q):
    return -np.sum((p - q) ** 2 / (p + q + EPS), axis=-1)


def _hellinger(p, q):
    return -np.sqrt(np.sum((np.sqrt(p) - np.sqrt(q)) ** 2, axis=-1)) / np.sqrt(2.0)


def _jeffrey(p, q):
    return -np.sum((p - q) * np.log((p + EPS) / (q + EPS)), axis=-1)


def _squared_chord(p, q):
    return -np.sum((np.sqrt(p) - np.sqrt(q)) ** 2, axis=-1)


def _smith(p, q):
    # provisional ratio form; sum(p + q) is 2 on the simplex
    return 1.0 - np.sum(np.abs(p - q), axis=-1) / np.sum(p + q, axis=-1)


def _emd(p, q):
    return -np.sum(np.abs(np.cumsum(p, axis=-1) - np.cumsum(q, axis=-1)), axis=-1)


_VALUE: dict[str, Callable] = {
    "cosine": _cosine,
    "dot": _dot,
    "scaled_dot": lambda x, y: _dot(x, y) / np.sqrt(x.shape[-1]),
    "scs": _scs,
    "l1": lambda x, y: _l1_diff(x - y),
    "l2": lambda x, y: _l2_diff(x - y),
    "rmse": lambda x, y: _rmse_diff(x - y),
    "geman_mcclure": lambda x, y: _gm_diff(x - y),
    "canberra": _canberra,
    "gfc": _gfc,
    "chi2_1": _chi2_1,
    "chi2_2": _chi2_2,
    "hellinger": _hellinger,
    "jeffrey": _jeffrey,
    "squared_chord": _squared_chord,
    "pearson": _pearson,
    "smith": _smith,
    "emd": _emd,
}


# -- analytic gradients: return (d/dx, d/dy) ---------------------------------

def _g_dot(x, y):
    return y.copy(), x.copy()


def _g_scaled_dot(x, y):
    s = 1.0 / np.sqrt(x.shape[-1])
    return y * s, x * s


def _g_cosine(x, y):
    nx, ny = _norm(x), _norm(y)
    den = (nx * ny + EPS)[..., None]
    dot = _dot(x, y)[..., None]
    dx = y / den - dot * ny[..., None] * _unit(x, nx) / den**2
    dy = x / den - dot * nx[..., None] * _unit(y, ny) / den**2
    return dx, dy


def _g_gfc(x, y):
    sgn = np.sign(_dot(x, y))[..., None]
    dx, dy = _g_cosine(x, y)
    return sgn * dx, sgn * dy


def _g_scs(x, y):
    nx, ny = _norm(x), _norm(y)
    c = _scs_core(x, y)
    outer = (SCS_POWER * np.abs(c) ** (SCS_POWER - 1.0))[..., None]
    den = ((nx + SCS_Q) * (ny + SCS_Q))[..., None]
    c = c[..., None]
    dcx = y / den - c * _unit(x, nx) / (nx[..., None] + SCS_Q)
    dcy = x / den - c * _unit(y, ny) / (ny[..., None] + SCS_Q)
    return outer * dcx, outer * dcy


def _g_pearson(x, y):
    xc = x - x.mean(axis=-1, keepdims=True)
    yc = y - y.mean(axis=-1, keepdims=True)
    gx, gy = _g_cosine(xc, yc)
    return gx - gx.mean(axis=-1, keepdims=True), gy - gy.mean(axis=-1, keepdims=True)


def _g_l1(x, y):
    s = np.sign(x - y)
    return -s, s


def _g_l2(x, y):
    d = x - y
    u = _unit(d, _norm(d))
    return -u, u


def _g_rmse(x, y):
    d = x - y
    c = x.shape[-1]
    r = np.sqrt(np.mean(d * d, axis=-1))[..., None]
    g = np.divide(d, c * r, out=np.zeros_like(d), where=r > 0)
    return -g, g


_GRAD: dict[str, Callable] = {
    "dot": _g_dot,
    "scaled_dot": _g_scaled_dot,
    "cosine": _g_cosine,
    "scs": _g_scs,
    "l1": _g_l1,
    "l2": _g_l2,
    "rmse": _g_rmse,
    "pearson": _g_pearson,
    "gfc": _g_gfc,
}


def _d(id, name, category, negated, **kw):
    return MetricDescriptor(
        id=id,
        name=name,
        category=category,
        negated_distance=negated,
        has_analytic_gradient=id in _GRAD,
        **kw,
    )


_REGISTRY: tuple[MetricDescriptor, ...] = (
    _d("cosine", "Cosine", 1, False),
    _d("dot", "Dot Product", 1, False),
    _d("scaled_dot", "Scaled Dot Product", 1, False),
    _d("scs", "Sharpened Cosine (SCS)", 1, False),
    _d("l1", "L1 Norm", 1, True, difference_based=True),
    _d("l2", "L2 Norm", 1, True, difference_based=True),
    _d("rmse", "Root Mean Square Error (RMSE)", 1, True, difference_based=True),
    _d("geman_mcclure", "Geman-McClure", 1, True, difference_based=True),
    _d("canberra", "Canberra", 1, True),
    _d("gfc", "GFC", 2, False),
    _d("chi2_1", "Chi-Squared Type 1", 3, True, uses_distribution=True),
    _d("chi2_2", "Chi-Squared Type 2", 3, True, uses_distribution=True),
    _d("hellinger", "Hellinger", 3, True, uses_distribution=True),
    _d("jeffrey", "Jeffrey Divergence", 3, True, uses_distribution=True),
    _d("squared_chord", "Squared Chord", 3, True, uses_distribution=True),
    _d("pearson", "Pearson Correlation", 3, False),
    _d("smith", "Smith Similarity", 3, False, uses_distribution=True, provisional=True),
    _d("emd", "Earth Mover's Distance (EMD)", 3, True, uses_distribution=True),
)
_BY_ID = {m.id: m for m in _REGISTRY}

METRIC_IDS: tuple[str, ...] = tuple(m.id for m in _REGISTRY)
ANALYTIC_METRIC_IDS: tuple[str, ...] = tuple(m.id for m in _REGISTRY if m.has_analytic_gradient)


def list_metrics() -> tuple[MetricDescriptor, ...]:
    return _REGISTRY


def get_metric(metric) -> MetricDescriptor:
    if isinstance(metric, MetricDescriptor):
        if _BY_ID.get(metric.id) != metric:
            raise RegistryError(f"unregistered metric descriptor {metric.id!r}")
        return metric
    try:
        return _BY_ID[metric]
    except (KeyError, TypeError):
        raise RegistryError(
            f"unknown metric {metric!r}; choose from {', '.join(METRIC_IDS)}"
        ) from None


def evaluate(metric, x, y) -> np.ndarray:
    """Batched similarity over the last axis of broadcast-compatible arrays."""
    m = get_metric(metric)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if m.uses_distribution:
        x, y = to_distribution(x, m.epsilon), to_distribution(y, m.epsilon)
    return _VALUE[m.id](x, y)


def reduce_difference(metric, diff) -> np.ndarray:
    """Evaluate a difference-based metric from ``x - y`` (sign irrelevant)."""
    m = get_metric(metric)
    if not m.difference_based:
        raise RegistryError(f"metric {m.id!r} is not difference-based")
    return _DIFF[m.id](np.asarray(diff, dtype=np.float64))


def numeric_gradient(metric, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Central differences with step 1e-3 * max(1, |component|), batched."""
    m = get_metric(metric)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x, y = np.broadcast_arrays(x, y)
    out = []
    for which in (0, 1):
        base = (x, y)[which]
        grad = np.empty_like(base)
        for i in range(base.shape[-1]):
            h = 1e-3 * np.maximum(1.0, np.abs(base[..., i]))
            plus = base.copy()
            minus = base.copy()
            plus[..., i] += h
            minus[..., i] -= h
            step = plus[..., i] - minus[..., i]
            if which == 0:
                fp, fm = evaluate(m, plus, y), evaluate(m, minus, y)
            else:
                fp, fm = evaluate(m, x, plus), evaluate(m, x, minus)
            grad[..., i] = (fp - fm) / step
        out.append(grad)
    return out[0], out[1]


def evaluate_gradient(metric, x, y, allow_numeric: bool = True):
    """Batched (d/dx, d/dy); numeric fallback for metrics without a closed form."""
    m = get_metric(metric)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if m.has_analytic_gradient:
        x, y = np.broadcast_arrays(x, y)
        return _GRAD[m.id](x, y)
    if not allow_numeric:
        raise RegistryError(
            f"metric {m.id!r} has no analytic gradient and numeric fallback is disabled"
        )
    return numeric_gradient(m, x, y)


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1:
        raise ShapeError(f"expected 1-D fibers, got shapes {x.shape} and {y.shape}")
    if x.shape != y.shape:
        raise ShapeError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 1:
        raise ShapeError("fibers must have at least one channel")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("non-finite fiber values")
    return x, y


def similarity(metric, x, y) -> float:
    """Similarity of neighbor fiber ``x`` to center fiber ``y``."""
    m = get_metric(metric)
    x, y = _check_pair(x, y)
    return float(evaluate(m, x, y))


def similarity_gradient(metric, x, y) -> MetricGradient:
    m = get_metric(metric)
    x, y = _check_pair(x, y)
    dx, dy = evaluate_gradient(m, x, y, allow_numeric=True)
    return MetricGradient(d_x=dx, d_y=dy)
