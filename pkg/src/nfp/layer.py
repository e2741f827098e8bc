"""Neighborhood feature pooling layer.

For every valid center position the layer compares the center channel
fiber with each of its ``N_r = (2r+1)**2 - 1`` neighbors (offsets scaled by
the dilation), producing an affinity stack ``(B, N_r, H', W')``. The stack
is averaged spatially, projected to the input width and multiplied into
the global-average-pooled features.

Two routes compute the affinity stack: :func:`affinity_forward` gathers
fibers with fixed one-hot depthwise kernels (plus +1/-1 difference kernels
for difference-based metrics); :func:`affinity_forward_naive` walks every
(b, n, i, j) and calls :func:`nfp.metrics.similarity` on extracted fibers.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import metrics as M
from .errors import ConfigError, ShapeError, StateError, ValidationError
from .npy import read_npy, write_array_npy
from .tensor import Tensor4, as_array4, global_average_pool

MATCH_INPUT = "match-input"


@dataclass(frozen=True)
class NfpConfig:
    radius: int = 1
    dilation: int = 1
    metric: str = "cosine"
    projection_out: int | str = MATCH_INPUT

    def __post_init__(self):
        if not isinstance(self.radius, (int, np.integer)) or self.radius < 1:
            raise ConfigError(f"radius must be a positive integer, got {self.radius!r}")
        if not isinstance(self.dilation, (int, np.integer)) or self.dilation < 1:
            raise ConfigError(f"dilation must be a positive integer, got {self.dilation!r}")
        M.get_metric(self.metric)
        po = self.projection_out
        if po != MATCH_INPUT and not (isinstance(po, (int, np.integer)) and po >= 1):
            raise ConfigError(f"projection_out must be a positive integer or {MATCH_INPUT!r}")

    @property
    def kernel_size(self) -> int:
        return 2 * self.radius + 1

    @property
    def n_neighbors(self) -> int:
        return self.kernel_size**2 - 1

    @property
    def span(self) -> int:
        """Extent of the dilated window along one axis."""
        return self.dilation * (self.kernel_size - 1) + 1

    @property
    def descriptor(self) -> M.MetricDescriptor:
        return M.get_metric(self.metric)

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        shrink = self.dilation * (self.kernel_size - 1)
        if height - shrink < 1 or width - shrink < 1:
            raise ShapeError(
                f"window does not fit: H={height}, W={width}, k={self.kernel_size}, "
                f"D={self.dilation} needs H, W >= {shrink + 1}"
            )
        return height - shrink, width - shrink

    def out_channels(self, in_channels: int) -> int:
        return in_channels if self.projection_out == MATCH_INPUT else int(self.projection_out)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NfpConfig":
        unknown = set(d) - {"radius", "dilation", "metric", "projection_out"}
        if unknown:
            raise ConfigError(f"unknown NFP config keys: {sorted(unknown)}")
        return cls(**d)


def neighbor_offsets(radius: int, dilation: int = 1) -> list[tuple[int, int]]:
    """Row-major (top-left first) offsets of the window, center excluded."""
    return [
        (dy * dilation, dx * dilation)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
        if (dy, dx) != (0, 0)
    ]


def selector_kernels(radius: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fixed sparse k x k kernels: center selector, neighbor selectors, differences.

    Difference kernels put +1 on the center and -1 on the neighbor.
    """
    k = 2 * radius + 1
    center = np.zeros((k, k))
    center[radius, radius] = 1.0
    offsets = neighbor_offsets(radius)
    neighbor = np.zeros((len(offsets), k, k))
    for n, (dy, dx) in enumerate(offsets):
        neighbor[n, radius + dy, radius + dx] = 1.0
    return center, neighbor, center[None] - neighbor


def _windows(arr: np.ndarray, cfg: NfpConfig) -> np.ndarray:
    # (B, C, H', W', k, k) view of dilated windows
    span = cfg.span
    win = sliding_window_view(arr, (span, span), axis=(2, 3))
    return win[..., :: cfg.dilation, :: cfg.dilation]


def depthwise_gather(arr: np.ndarray, kernels: np.ndarray, cfg: NfpConfig) -> np.ndarray:
    """Valid dilated depthwise correlation of every channel with each kernel.

    ``kernels`` is (K, k, k); the result is (B, K, C, H', W').
    """
    return np.einsum("bchwij,kij->bkchw", _windows(arr, cfg), kernels)


def _check_input(x, cfg: NfpConfig) -> np.ndarray:
    if not isinstance(cfg, NfpConfig):
        raise ConfigError("cfg must be an NfpConfig")
    arr = as_array4(x)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("input contains non-finite values")
    if arr.shape[1] < 1:
        raise ShapeError("input needs at least one channel")
    cfg.output_size(arr.shape[2], arr.shape[3])
    return arr


def _affinity(arr: np.ndarray, cfg: NfpConfig) -> np.ndarray:
    m = cfg.descriptor
    center_k, neighbor_k, diff_k = selector_kernels(cfg.radius)
    if m.difference_based:
        diff = depthwise_gather(arr, diff_k, cfg)
        return M.reduce_difference(m, np.moveaxis(diff, 2, -1))
    center = depthwise_gather(arr, center_k[None], cfg)
    neigh = depthwise_gather(arr, neighbor_k, cfg)
    return M.evaluate(m, np.moveaxis(neigh, 2, -1), np.moveaxis(center, 2, -1))


def affinity_forward(x, cfg: NfpConfig) -> Tensor4:
    """Affinity stack (B, N_r, H', W') via fixed-kernel gathers."""
    return Tensor4(_affinity(_check_input(x, cfg), cfg))


def affinity_forward_naive(x, cfg: NfpConfig) -> Tensor4:
    """Reference affinity stack: explicit loop over (b, n, i, j)."""
    arr = _check_input(x, cfg)
    b_, _, h, w = arr.shape
    hp, wp = cfg.output_size(h, w)
    offsets = neighbor_offsets(cfg.radius, cfg.dilation)
    o = cfg.radius * cfg.dilation
    out = np.empty((b_, len(offsets), hp, wp))
    for b in range(b_):
        for n, (dy, dx) in enumerate(offsets):
            for i in range(hp):
                for j in range(wp):
                    neighbor = arr[b, :, i + o + dy, j + o + dx]
                    center = arr[b, :, i + o, j + o]
                    out[b, n, i, j] = M.similarity(cfg.metric, neighbor, center)
    return Tensor4(out)


def nfp_pool(s) -> np.ndarray:
    """Spatial mean of an affinity stack; (B, N_r) float64."""
    arr = as_array4(s)
    if arr.shape[2] * arr.shape[3] < 1:
        raise ShapeError(f"empty spatial extent {arr.shape[2]}x{arr.shape[3]}")
    return arr.mean(axis=(2, 3))


@dataclass
class NfpHead:
    """Projection ``pooled @ weights.T + bias`` from N_r to C' features."""

    weights: np.ndarray
    bias: np.ndarray
    identity: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"head weights {self.weights.shape} and bias {self.bias.shape} are inconsistent"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValidationError("head parameters must be finite")

    @classmethod
    def initialize(cls, out_features: int, n_neighbors: int, seed=0) -> "NfpHead":
        """Fan-in uniform init on [-1/sqrt(N_r), 1/sqrt(N_r)], zero bias."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(n_neighbors)
        w = rng.uniform(-bound, bound, size=(out_features, n_neighbors))
        return cls(w, np.zeros(out_features))

    @classmethod
    def identity_head(cls, n_neighbors: int) -> "NfpHead":
        return cls(np.eye(n_neighbors), np.zeros(n_neighbors), identity=True)

    @property
    def out_features(self) -> int:
        return self.weights.shape[0]

    @property
    def n_neighbors(self) -> int:
        return self.weights.shape[1]

    @property
    def parameter_count(self) -> int:
        return self.weights.size + self.bias.size

    def copy(self) -> "NfpHead":
        return NfpHead(self.weights.copy(), self.bias.copy(), self.identity)

    def save(self, directory, cfg: NfpConfig | None = None, prefix: str = "head") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_array_npy(self.weights.astype("<f4"), d / f"{prefix}_weights.npy")
        write_array_npy(self.bias.astype("<f4").reshape(1, -1), d / f"{prefix}_bias.npy")
        if cfg is not None:
            tmp = d / f".{prefix}_config.json.tmp"
            tmp.write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
            os.replace(tmp, d / f"{prefix}_config.json")

    @classmethod
    def load(cls, directory, prefix: str = "head") -> tuple["NfpHead", NfpConfig | None]:
        d = Path(directory)
        w = np.asarray(read_npy(d / f"{prefix}_weights.npy"))[0, 0]
        b = np.asarray(read_npy(d / f"{prefix}_bias.npy")).reshape(-1)
        cfg_path = d / f"{prefix}_config.json"
        cfg = NfpConfig.from_dict(json.loads(cfg_path.read_text())) if cfg_path.exists() else None
        return cls(w, b), cfg


def project(pooled, head: NfpHead) -> np.ndarray:
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.ndim != 2 or pooled.shape[1] != head.n_neighbors:
        raise ShapeError(
            f"pooled shape {pooled.shape} incompatible with head expecting {head.n_neighbors} inputs"
        )
    if head.identity:
        return pooled.copy()
    return pooled @ head.weights.T + head.bias


def fuse(gap_vec, nfp_vec) -> np.ndarray:
    gap_vec = np.asarray(gap_vec, dtype=np.float64)
    nfp_vec = np.asarray(nfp_vec, dtype=np.float64)
    if gap_vec.shape != nfp_vec.shape:
        raise ShapeError(f"cannot fuse shapes {gap_vec.shape} and {nfp_vec.shape}")
    return gap_vec * nfp_vec


@dataclass
class NfpCache:
    x: np.ndarray
    gap: np.ndarray
    stack: np.ndarray
    pooled: np.ndarray
    projected: np.ndarray
    cfg: NfpConfig = field(repr=False)


def nfp_forward(x, cfg: NfpConfig, head: NfpHead) -> tuple[np.ndarray, NfpCache]:
    """GAP(x) * project(pool(affinity(x))); returns (B, C) features and a cache."""
    arr = _check_input(x, cfg)
    c = arr.shape[1]
    if cfg.out_channels(c) != c or head.out_features != c:
        raise ShapeError(
            f"fusion needs C' == C: input has {c} channels, head produces {head.out_features}"
        )
    if head.n_neighbors != cfg.n_neighbors:
        raise ShapeError(f"head expects {head.n_neighbors} neighbors, config has {cfg.n_neighbors}")
    gap = global_average_pool(arr)
    stack = _affinity(arr, cfg)
    pooled = nfp_pool(stack)
    z = project(pooled, head)
    return fuse(gap, z), NfpCache(arr, gap, stack, pooled, z, cfg)


def head_backward(grad_out, gap, pooled, projected, head: NfpHead):
    """Reverse pass through fuse and project.

    Returns ``(grad_gap, grad_pooled, grad_weights, grad_bias)``.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != gap.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != feature shape {gap.shape}")
    grad_gap = grad_out * projected
    grad_z = grad_out * gap
    grad_w = grad_z.T @ pooled
    grad_b = grad_z.sum(axis=0)
    grad_pooled = grad_z if head.identity else grad_z @ head.weights
    return grad_gap, grad_pooled, grad_w, grad_b


def affinity_backward(grad_stack, x, cfg: NfpConfig, allow_numeric: bool = False) -> np.ndarray:
    """Gradient of ``sum(grad_stack * affinity(x))`` with respect to ``x``."""
    arr = as_array4(x)
    b_, c, h, w = arr.shape
    hp, wp = cfg.output_size(h, w)
    o = cfg.radius * cfg.dilation
    center = np.moveaxis(arr[:, :, o : o + hp, o : o + wp], 1, -1)
    grad_x = np.zeros_like(arr)
    grad_center = np.zeros((b_, hp, wp, c))
    for n, (dy, dx) in enumerate(neighbor_offsets(cfg.radius, cfg.dilation)):
        ys, xs = o + dy, o + dx
        neighbor = np.moveaxis(arr[:, :, ys : ys + hp, xs : xs + wp], 1, -1)
        g_n, g_c = M.evaluate_gradient(cfg.metric, neighbor, center, allow_numeric=allow_numeric)
        weight = grad_stack[:, n, :, :, None]
        grad_x[:, :, ys : ys + hp, xs : xs + wp] += np.moveaxis(weight * g_n, -1, 1)
        grad_center += weight * g_c
    grad_x[:, :, o : o + hp, o : o + wp] += np.moveaxis(grad_center, -1, 1)
    return grad_x


def nfp_backward(grad_out, cache: NfpCache | None, cfg: NfpConfig, head: NfpHead,
                 allow_numeric: bool = False):
    """Exact reverse-mode gradients of :func:`nfp_forward`.

    Returns ``(grad_x, grad_weights, grad_bias)``. Metrics without a closed
    form gradient need ``allow_numeric=True``.
    """
    if cache is None:
        raise StateError("nfp_backward called without a forward cache")
    if cache.cfg != cfg:
        raise StateError("cache was produced with a different NfpConfig")
    b_, c, h, w = cache.x.shape
    grad_gap, grad_pooled, grad_w, grad_b = head_backward(
        grad_out, cache.gap, cache.pooled, cache.projected, head
    )
    hp, wp = cache.stack.shape[2:]
    grad_stack = np.broadcast_to(grad_pooled[:, :, None, None] / (hp * wp), cache.stack.shape)
    grad_x = affinity_backward(grad_stack, cache.x, cfg, allow_numeric=allow_numeric)
    grad_x += grad_gap[:, :, None, None] / (h * w)
    return grad_x, grad_w, grad_b


def layer_parameter_count(out_features: int, cfg: NfpConfig) -> int:
    return out_features * cfg.n_neighbors + out_features
