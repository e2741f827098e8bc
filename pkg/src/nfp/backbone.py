"""Frozen two-stage convolutional filter bank used as a stand-in backbone."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import as_array4

INPUT_MEAN = 0.5
INPUT_STD = 0.25


def conv2d(x: np.ndarray, weight: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Plain cross-correlation: x (B, Cin, H, W), weight (Cout, Cin, k, k)."""
    cout, cin, k, _ = weight.shape
    if x.shape[1] != cin:
        raise ShapeError(f"conv expects {cin} input channels, got {x.shape[1]}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, Cin, Ho, Wo, k, k) x (Cout, Cin, k, k) -> (B, Cout, Ho, Wo)
    return np.einsum("bchwij,ocij->bohw", win, weight, optimize=True)


class FilterBank:
    """Two 3x3 stride-2 convolutions with ReLU, Gaussian weights, frozen.

    ``stages(x)`` returns the feature map after each stage; these are the
    tap points where NFP can be attached.
    """

    def __init__(self, channels=(16, 32), in_channels: int = 3, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.channels = tuple(int(c) for c in channels)
        self.seed = seed
        weights = []
        cin = in_channels
        for cout in self.channels:
            fan_in = cin * 9
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, 3, 3))
            w.flags.writeable = False
            weights.append(w)
            cin = cout
        self.weights = tuple(weights)

    @property
    def num_stages(self) -> int:
        return len(self.weights)

    def stages(self, images, chunk: int = 64) -> list[np.ndarray]:
        arr = as_array4(images)
        outs = [[] for _ in self.weights]
        for start in range(0, arr.shape[0], chunk):
            h = (arr[start : start + chunk] - INPUT_MEAN) / INPUT_STD
            for s, w in enumerate(self.weights):
                h = np.maximum(conv2d(h, w, stride=2, padding=1), 0.0)
                outs[s].append(h)
        return [np.concatenate(o, axis=0) for o in outs]
