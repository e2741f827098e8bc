"""Central-finite-difference verification of metric and layer gradients.

These checks only ever call forward evaluations; they never touch the
analytic gradient code except to compare against it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import metrics as M
from .layer import NfpConfig, NfpHead, nfp_backward, nfp_forward

CHANNEL_CHOICES = (2, 8, 64)


def relative_error(a, b, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||), with a tiny floor for all-zero pairs."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def central_difference(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` using the realized step width."""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        xp = flat[i]
        fp = f(x)
        flat[i] = orig - h
        xm = flat[i]
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (xp - xm)
    return grad


def near_nonsmooth(metric, x: np.ndarray, y: np.ndarray, delta: float = 1e-3) -> bool:
    """True when (x, y) lies within ``delta`` of a kink of ``metric``.

    Distances to kinks that live on the simplex are measured back in input
    units by multiplying with the shift-min normalizer.
    """
    m = M.get_metric(metric)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.linalg.norm(x) < delta or np.linalg.norm(y) < delta:
        return True
    if m.id == "pearson" and x.size <= 2:
        # centered 2-vectors are collinear: the metric is locally constant at +-1
        return True
    if m.id in ("l1", "canberra") and np.min(np.abs(x - y)) < delta:
        return True
    if m.id in ("l2", "rmse") and np.linalg.norm(x - y) < delta:
        return True
    if m.id == "canberra" and min(np.min(np.abs(x)), np.min(np.abs(y))) < delta:
        return True
    if m.id == "gfc" and abs(np.dot(x, y)) < delta:
        return True
    if m.id == "pearson":
        xc, yc = x - x.mean(), y - y.mean()
        if np.linalg.norm(xc) < delta or np.linalg.norm(yc) < delta:
            return True
    if m.uses_distribution:
        for v in (x, y):
            if v.size > 1 and np.diff(np.sort(v))[0] < delta:
                return True
        scale = max(np.sum(x - x.min()), np.sum(y - y.min()), 1.0)
        diff = M.to_distribution(x, m.epsilon) - M.to_distribution(y, m.epsilon)
        if m.id == "smith" and np.min(np.abs(diff)) * scale < delta:
            return True
        if m.id == "emd" and x.size > 1 and np.min(np.abs(np.cumsum(diff))[:-1]) * scale < delta:
            return True
    return False


def channel_choices(metric) -> tuple[int, ...]:
    m = M.get_metric(metric)
    return tuple(c for c in CHANNEL_CHOICES if not (m.id == "pearson" and c <= 2))


def sample_pair(metric, rng: np.random.Generator, channels: int, delta: float = 1e-3):
    """Random float32-representable fibers away from non-smooth loci."""
    while True:
        x = rng.normal(size=channels).astype(np.float32).astype(np.float64)
        y = rng.normal(size=channels).astype(np.float32).astype(np.float64)
        if not near_nonsmooth(metric, x, y, delta):
            return x, y


@dataclass
class CheckResult:
    name: str
    trials: int
    max_error: float
    tolerance: float
    worst: dict = field(default_factory=dict, repr=False)

    @property
    def passed(self) -> bool:
        return bool(self.max_error < self.tolerance)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "trials": self.trials,
            "max_relative_error": self.max_error,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def check_metric_gradient(metric, trials: int = 100, tolerance: float = 1e-4, seed: int = 0,
                          h: float = 1e-4) -> CheckResult:
    """Compare :func:`similarity_gradient` with central differences."""
    m = M.get_metric(metric)
    rng = np.random.default_rng(seed)
    choices = channel_choices(m)
    # the numeric fallback steps up to ~1e-3 * |x|; keep kinks well outside it
    delta = 1e-3 if m.has_analytic_gradient else 2e-2
    worst_err, worst = 0.0, {}
    for t in range(trials):
        c = choices[t % len(choices)]
        x, y = sample_pair(m, rng, c, delta)
        g = M.similarity_gradient(m, x, y)
        fd_x = central_difference(lambda v: M.similarity(m, v, y), x, h)
        fd_y = central_difference(lambda v: M.similarity(m, x, v), y, h)
        err = relative_error(np.concatenate([g.d_x, g.d_y]), np.concatenate([fd_x, fd_y]))
        if err >= worst_err:
            worst_err, worst = err, {"x": x, "y": y}
    return CheckResult(m.id, trials, worst_err, tolerance, worst)


def _layer_loss(x, cfg, head, weights):
    feats, _ = nfp_forward(x, cfg, head)
    return float(np.sum(feats * weights))


def check_nfp_backward(metric="cosine", trials: int = 100, tolerance: float = 1e-3, seed: int = 0,
                       shape=(1, 3, 6, 6), radius: int = 1, dilation: int = 1,
                       h: float = 1e-4) -> CheckResult:
    """Finite-difference check of :func:`nfp_backward` over x, W_p and b_p.

    The scalar loss is ``sum(features * R)`` with a random ``R``, which
    exercises every output coordinate.
    """
    m = M.get_metric(metric)
    cfg = NfpConfig(radius=radius, dilation=dilation, metric=m.id)
    rng = np.random.default_rng(seed)
    worst_err, worst = 0.0, {}
    for _ in range(trials):
        while True:
            x = rng.normal(size=shape).astype(np.float32).astype(np.float64)
            if not _stack_near_nonsmooth(x, cfg):
                break
        head = NfpHead.initialize(shape[1], cfg.n_neighbors, rng)
        head.bias = rng.normal(size=shape[1])
        r_weights = rng.normal(size=(shape[0], shape[1]))
        _, cache = nfp_forward(x, cfg, head)
        gx, gw, gb = nfp_backward(r_weights, cache, cfg, head, allow_numeric=not m.has_analytic_gradient)

        fd_x = central_difference(lambda v: _layer_loss(v, cfg, head, r_weights), x, h)

        def loss_w(wv):
            return _layer_loss(x, cfg, NfpHead(wv, head.bias), r_weights)

        def loss_b(bv):
            return _layer_loss(x, cfg, NfpHead(head.weights, bv), r_weights)

        fd_w = central_difference(loss_w, head.weights, h)
        fd_b = central_difference(loss_b, head.bias, h)
        err = max(relative_error(gx, fd_x), relative_error(gw, fd_w), relative_error(gb, fd_b))
        if err >= worst_err:
            worst_err, worst = err, {"x": x, "weights": head.weights, "bias": head.bias}
    return CheckResult(f"nfp_backward[{m.id}]", trials, worst_err, tolerance, worst)


def _stack_near_nonsmooth(x: np.ndarray, cfg: NfpConfig, delta: float = 1e-3) -> bool:
    from .layer import neighbor_offsets

    b_, _, h, w = x.shape
    hp, wp = cfg.output_size(h, w)
    o = cfg.radius * cfg.dilation
    for b in range(b_):
        for dy, dx in neighbor_offsets(cfg.radius, cfg.dilation):
            for i in range(hp):
                for j in range(wp):
                    if near_nonsmooth(cfg.metric, x[b, :, i + o + dy, j + o + dx], x[b, :, i + o, j + o], delta):
                        return True
    return False
