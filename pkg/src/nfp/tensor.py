"""Dense rank-4 float32 tensors, image loading and global average pooling."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .errors import FormatError, ShapeError, ValidationError


class Tensor4:
    """Immutable (B, C, H, W) float32 array, row-major with W fastest.

    The wrapped buffer is a private read-only copy, so a Tensor4 can be
    shared across threads. ``np.asarray(t)`` returns that read-only view.
    """

    __slots__ = ("_array",)

    def __init__(self, array):
        arr = np.asarray(array)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 needs 4 extents, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("tensor contains non-finite values")
        arr = np.array(arr, dtype=np.float32, order="C", copy=True)
        arr.flags.writeable = False
        self._array = arr

    @property
    def array(self) -> np.ndarray:
        return self._array

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self._array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat view of the buffer in storage order."""
        return self._array.reshape(-1)

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._array
        return self._array.astype(dtype)

    def __getitem__(self, idx):
        return self._array[idx]

    def __eq__(self, other):
        if not isinstance(other, Tensor4):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._array, other._array)

    __hash__ = None

    def __repr__(self):
        return f"Tensor4(shape={self.shape})"


def tensor_create(shape: Sequence[int], data) -> Tensor4:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or any(s < 0 for s in shape):
        raise ShapeError(f"expected 4 non-negative extents, got {shape}")
    flat = np.asarray(data, dtype=np.float64).reshape(-1)
    expected = int(np.prod(shape))
    if flat.size != expected:
        raise ShapeError(
            f"data length {flat.size} does not match shape {shape} (needs {expected})"
        )
    return Tensor4(flat.reshape(shape))


def as_array4(x, dtype=np.float64) -> np.ndarray:
    """Coerce a Tensor4 or array-like to a rank-4 ndarray of ``dtype``."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 tensor, got shape {arr.shape}")
    return arr


def global_average_pool(x) -> np.ndarray:
    """Spatial mean per (batch, channel); returns a (B, C) float64 matrix."""
    arr = as_array4(x)
    b, c, h, w = arr.shape
    if h * w < 1:
        raise ShapeError(f"empty spatial extent {h}x{w}")
    # sequential per-channel accumulation keeps the summation order fixed
    return arr.reshape(b, c, h * w).sum(axis=2) / (h * w)


def load_image(path, mean=0.0, std=1.0) -> Tensor4:
    """Read an 8-bit gray or RGB PNG as a (1, C, H, W) normalized tensor.

    ``mean`` and ``std`` are scalars or one value per channel; each pixel
    ``p`` maps to ``(p / 255 - mean_c) / std_c``.
    """
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            if img.format != "PNG":
                raise FormatError(f"{path}: expected PNG, got {img.format}")
            if img.mode not in ("L", "RGB"):
                raise FormatError(f"{path}: unsupported PNG mode {img.mode!r} (need L or RGB)")
            pixels = np.asarray(img, dtype=np.float64)
    except (OSError, UnidentifiedImageError) as exc:
        raise FormatError(f"{path}: unreadable image ({exc})") from exc
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    chw = pixels.transpose(2, 0, 1) / 255.0
    n = chw.shape[0]
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64).reshape(-1), (n,))
    std = np.broadcast_to(np.asarray(std, dtype=np.float64).reshape(-1), (n,))
    if np.any(std <= 0):
        raise ValidationError("normalization std must be positive")
    chw = (chw - mean[:, None, None]) / std[:, None, None]
    return Tensor4(chw[None])


def write_gray_png(values: np.ndarray, path) -> None:
    """Write a 2-D array of values in [0, 1] as an 8-bit grayscale PNG."""
    from PIL import Image

    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"grayscale image must be 2-D, got shape {arr.shape}")
    pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels, mode="L").save(path, format="PNG")


def write_rgb_png(chw: np.ndarray, path) -> None:
    """Write a (C, H, W) array in [0, 1] (C = 1 or 3) as an 8-bit PNG."""
    from PIL import Image

    arr = np.asarray(chw, dtype=np.float64)
    pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if pixels.shape[0] == 1:
        Image.fromarray(pixels[0], mode="L").save(path, format="PNG")
    elif pixels.shape[0] == 3:
        Image.fromarray(pixels.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")
    else:
        raise ShapeError(f"PNG needs 1 or 3 channels, got {pixels.shape[0]}")
