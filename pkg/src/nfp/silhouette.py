"""Silhouette score on Euclidean distances."""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ShapeError, ValidationError


def silhouette_samples(embeddings, labels) -> np.ndarray:
    """Per-point silhouette ``(b - a) / max(a, b)``.

    ``a`` is the mean distance to the other members of the point's class,
    ``b`` the smallest mean distance to another class. Points in singleton
    classes score 0.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ShapeError(f"embeddings {x.shape} and labels {labels.shape} do not match")
    classes, inverse, sizes = np.unique(labels, return_inverse=True, return_counts=True)
    if classes.size < 2:
        raise ValidationError("silhouette needs at least two classes")
    dist = cdist(x, x)

    onehot = np.zeros((x.shape[0], classes.size))
    onehot[np.arange(x.shape[0]), inverse] = 1.0
    sums = dist @ onehot  # (N, K): total distance to each class
    own = sizes[inverse]
    a = np.divide(sums[np.arange(x.shape[0]), inverse], own - 1,
                  out=np.zeros(x.shape[0]), where=own > 1)
    means = sums / sizes[None, :]
    means[np.arange(x.shape[0]), inverse] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.divide(b - a, denom, out=np.zeros_like(a), where=denom > 0)
    s[own == 1] = 0.0
    return s


def silhouette_score(embeddings, labels) -> float:
    return float(np.mean(silhouette_samples(embeddings, labels)))
