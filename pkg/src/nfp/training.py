"""Desk-scale classification harness: frozen filter bank, NFP/GAP head, linear classifier.

The backbone is frozen and NFP has no parameters before its projection, so
per-sample GAP vectors and pooled affinity vectors are computed once per
split. Training then only touches the projection heads and the classifier,
using the same reverse pass as :func:`nfp.layer.head_backward`.
"""

from __future__ import annotations

import datetime as _dt
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics as M
from .backbone import FilterBank
from .errors import ConfigError, DivergenceError, ShapeError
from .layer import NfpConfig, NfpHead, affinity_forward, fuse, head_backward, nfp_pool, project
from .silhouette import silhouette_score
from .tensor import global_average_pool

FEATURE_CHUNK = 64


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    metric: str = "cosine"
    taps: tuple[int, ...] = (1,)
    baseline: bool = False
    radius: int = 1
    dilation: int = 1
    backbone_seed: int = 0
    stage_channels: tuple[int, ...] = (16, 32)

    def __post_init__(self):
        object.__setattr__(self, "taps", tuple(int(t) for t in self.taps))
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("learning_rate, batch_size, max_epochs and patience must be positive")
        if not self.taps:
            raise ConfigError("at least one tap is required")
        if len(set(self.taps)) != len(self.taps):
            raise ConfigError(f"duplicate taps {self.taps}")
        for t in self.taps:
            if not 0 <= t < len(self.stage_channels):
                raise ConfigError(f"tap {t} outside the {len(self.stage_channels)}-stage filter bank")
        M.get_metric(self.metric)
        self.nfp_config()

    def nfp_config(self) -> NfpConfig:
        return NfpConfig(radius=self.radius, dilation=self.dilation, metric=self.metric)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["taps"] = list(self.taps)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def closed_form_parameter_count(cfg: TrainConfig, num_classes: int) -> int:
    """Trainable parameters: one head per tap plus the linear classifier."""
    n_r = cfg.nfp_config().n_neighbors
    widths = [cfg.stage_channels[t] for t in cfg.taps]
    heads = 0 if cfg.baseline else sum(c * n_r + c for c in widths)
    return heads + num_classes * sum(widths) + num_classes


@dataclass
class TapFeatures:
    """Per-split cached branch inputs: GAP vectors and pooled affinities per tap."""

    gap: dict[int, np.ndarray]
    pooled: dict[int, np.ndarray]


def extract_features(bank: FilterBank, images, taps, nfp_cfg: NfpConfig | None) -> TapFeatures:
    maps = bank.stages(images)
    gap, pooled = {}, {}
    for t in taps:
        fmap = maps[t]
        gap[t] = global_average_pool(fmap)
        if nfp_cfg is not None:
            pooled[t] = np.concatenate([
                nfp_pool(affinity_forward(fmap[s : s + FEATURE_CHUNK], nfp_cfg))
                for s in range(0, fmap.shape[0], FEATURE_CHUNK)
            ])
    return TapFeatures(gap, pooled)


@dataclass
class Model:
    filter_bank: FilterBank
    taps: tuple[int, ...]
    nfp_configs: dict[int, NfpConfig]
    heads: dict[int, NfpHead]
    classifier_weights: np.ndarray
    classifier_bias: np.ndarray
    baseline: bool = False

    @property
    def embedding_width(self) -> int:
        return self.classifier_weights.shape[1]

    @property
    def parameter_count(self) -> int:
        heads = sum(h.parameter_count for h in self.heads.values())
        return heads + self.classifier_weights.size + self.classifier_bias.size

    def embed(self, feats: TapFeatures) -> np.ndarray:
        parts = []
        for t in self.taps:
            if self.baseline:
                parts.append(feats.gap[t])
            else:
                parts.append(fuse(feats.gap[t], project(feats.pooled[t], self.heads[t])))
        return np.concatenate(parts, axis=1)

    def logits(self, embeddings: np.ndarray) -> np.ndarray:
        return embeddings @ self.classifier_weights.T + self.classifier_bias

    def features_for(self, images) -> TapFeatures:
        cfg = None if self.baseline else self.nfp_configs[self.taps[0]]
        return extract_features(self.filter_bank, images, self.taps, cfg)

    def params(self) -> dict[str, np.ndarray]:
        p = {"classifier_weights": self.classifier_weights, "classifier_bias": self.classifier_bias}
        for t, h in self.heads.items():
            p[f"head{t}_weights"] = h.weights
            p[f"head{t}_bias"] = h.bias
        return p

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        self.classifier_weights = snap["classifier_weights"].copy()
        self.classifier_bias = snap["classifier_bias"].copy()
        for t, h in self.heads.items():
            h.weights = snap[f"head{t}_weights"].copy()
            h.bias = snap[f"head{t}_bias"].copy()


def build_model(cfg: TrainConfig, num_classes: int, bank: FilterBank | None = None) -> Model:
    bank = bank or FilterBank(cfg.stage_channels, seed=cfg.backbone_seed)
    rng = np.random.default_rng(cfg.seed)
    nfp_cfg = cfg.nfp_config()
    heads, configs = {}, {}
    if not cfg.baseline:
        for t in cfg.taps:
            configs[t] = nfp_cfg
            heads[t] = NfpHead.initialize(cfg.stage_channels[t], nfp_cfg.n_neighbors, rng)
    width = sum(cfg.stage_channels[t] for t in cfg.taps)
    bound = 1.0 / np.sqrt(width)
    w = rng.uniform(-bound, bound, size=(num_classes, width))
    return Model(bank, cfg.taps, configs, heads, w, np.zeros(num_classes), cfg.baseline)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = logits.shape[0]
    loss = -float(np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def model_gradients(model: Model, feats: TapFeatures, labels: np.ndarray):
    """Loss and gradients of every trainable parameter on one batch."""
    emb = model.embed(feats)
    loss, g_logits = softmax_cross_entropy(model.logits(emb), labels)
    grads = {
        "classifier_weights": g_logits.T @ emb,
        "classifier_bias": g_logits.sum(axis=0),
    }
    if not model.baseline:
        g_emb = g_logits @ model.classifier_weights
        start = 0
        for t in model.taps:
            c = feats.gap[t].shape[1]
            head = model.heads[t]
            z = project(feats.pooled[t], head)
            _, _, gw, gb = head_backward(g_emb[:, start : start + c], feats.gap[t], feats.pooled[t], z, head)
            grads[f"head{t}_weights"] = gw
            grads[f"head{t}_bias"] = gb
            start += c
    return loss, grads


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _subset(feats: TapFeatures, idx) -> TapFeatures:
    return TapFeatures({t: g[idx] for t, g in feats.gap.items()},
                       {t: p[idx] for t, p in feats.pooled.items()})


def _loss_acc(model: Model, feats: TapFeatures, labels: np.ndarray) -> tuple[float, float]:
    logits = model.logits(model.embed(feats))
    loss, _ = softmax_cross_entropy(logits, labels)
    return loss, float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass
class TrainReport:
    config: dict
    seed: int
    num_classes: int
    parameter_count: int
    initial_train_loss: float
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = 0.0
    test_accuracy: float = 0.0
    silhouette: float | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "num_classes": self.num_classes,
            "parameter_count": self.parameter_count,
            "initial_train_loss": self.initial_train_loss,
            "epochs": self.epochs,
            "epochs_run": len(self.epochs),
            "best_epoch": self.best_epoch,
            "best_val_accuracy": self.best_val_accuracy,
            "test_accuracy": self.test_accuracy,
            "silhouette": self.silhouette,
            "meta": self.meta,
        }


@dataclass
class SplitFeatures:
    train: TapFeatures
    val: TapFeatures
    test: TapFeatures


def prepare_features(cfg: TrainConfig, data, bank: FilterBank | None = None) -> SplitFeatures:
    bank = bank or FilterBank(cfg.stage_channels, seed=cfg.backbone_seed)
    nfp_cfg = None if cfg.baseline else cfg.nfp_config()
    return SplitFeatures(*(extract_features(bank, ds.images, cfg.taps, nfp_cfg) for ds in data))


def train(cfg: TrainConfig, data, features: SplitFeatures | None = None):
    """Adam on softmax cross-entropy with early stopping on validation accuracy.

    ``data`` is ``(train, val, test)`` LabeledSets. Pass ``features`` from
    :func:`prepare_features` to reuse cached backbone outputs across runs.
    Returns ``(model, report)``; the model holds the best-validation weights.
    """
    started = time.perf_counter()
    train_set, val_set, test_set = data
    if min(len(train_set), len(val_set), len(test_set)) < 1:
        raise ConfigError("every split must be non-empty")
    num_classes = int(max(train_set.labels.max(), val_set.labels.max(), test_set.labels.max())) + 1
    shapes = {ds.images.shape[1:] for ds in data}
    if len(shapes) != 1:
        raise ShapeError(f"splits disagree on image shape: {sorted(shapes)}")

    bank = FilterBank(cfg.stage_channels, in_channels=train_set.images.shape[1], seed=cfg.backbone_seed)
    feats = features or prepare_features(cfg, data, bank)
    model = build_model(cfg, num_classes, bank)
    y_train, y_val = train_set.labels, val_set.labels

    initial_loss, _ = _loss_acc(model, feats.train, y_train)
    report = TrainReport(cfg.to_dict(), cfg.seed, num_classes, model.parameter_count, initial_loss)
    params = model.params()
    opt = Adam(params, lr=cfg.learning_rate)

    best = (-1.0, np.inf)
    best_snap = model.snapshot()
    stale = 0
    n = len(train_set)
    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            loss, grads = model_gradients(model, _subset(feats.train, idx), y_train[idx])
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}", epoch, b)
            opt.step(params, grads)
        tr_loss, tr_acc = _loss_acc(model, feats.train, y_train)
        va_loss, va_acc = _loss_acc(model, feats.val, y_val)
        if not (np.isfinite(tr_loss) and np.isfinite(va_loss)):
            raise DivergenceError(f"non-finite loss after epoch {epoch}", epoch, b)
        report.epochs.append({
            "epoch": epoch,
            "train_loss": tr_loss,
            "train_accuracy": tr_acc,
            "val_loss": va_loss,
            "val_accuracy": va_acc,
        })
        if va_acc > best[0] or (va_acc == best[0] and va_loss < best[1]):
            best = (va_acc, va_loss)
            best_snap = model.snapshot()
            report.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    model.restore(best_snap)
    report.best_val_accuracy = best[0]
    test_acc, emb = _evaluate_features(model, feats.test, test_set.labels)
    report.test_accuracy = test_acc
    report.silhouette = _safe_silhouette(emb, test_set.labels)
    report.meta = {
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    return model, report


def _evaluate_features(model: Model, feats: TapFeatures, labels: np.ndarray):
    emb = model.embed(feats)
    pred = np.argmax(model.logits(emb), axis=1)
    return float(np.mean(pred == labels)), emb


def _safe_silhouette(emb: np.ndarray, labels: np.ndarray) -> float | None:
    counts = np.bincount(labels)
    counts = counts[counts > 0]
    if counts.size < 2 or np.any(counts < 2):
        return None
    return silhouette_score(emb, labels)


def evaluate(model: Model, dataset) -> tuple[float, np.ndarray]:
    """Argmax accuracy and pre-classifier embeddings (N, C_total)."""
    if dataset.images.shape[1] != model.filter_bank.weights[0].shape[1]:
        raise ShapeError(
            f"model expects {model.filter_bank.weights[0].shape[1]} input channels, "
            f"got {dataset.images.shape[1]}"
        )
    return _evaluate_features(model, model.features_for(dataset.images), dataset.labels)
