"""Deterministic synthetic texture datasets.

Each class is a texture generator (checkerboard, oriented stripes,
spatially correlated noise, random blobs). Every sample is standardized to
the same mean and contrast, so class identity lives in spatial structure
rather than in global intensity.

Randomness is counter-based: the sample seed is a pure function of
``(master_seed, split, class, index)`` and keys a Philox generator, so
samples can be produced in any order or in parallel.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError
from .npy import read_npy, write_array_npy, write_npy
from .tensor import Tensor4

SPLITS = ("train", "val", "test")
KINDS = ("checkerboard", "stripes", "correlated_noise", "blobs")

# derived seed layout: master | split | class | index
_INDEX_BITS = 20
_CLASS_BITS = 8
_SPLIT_BITS = 2
MAX_PER_CLASS = 1 << _INDEX_BITS
MAX_CLASSES = 1 << _CLASS_BITS

BASE_LEVEL = 0.5


@dataclass(frozen=True)
class TextureSpec:
    class_id: int
    kind: str
    params: dict = field(default_factory=dict)
    # param name -> (low, high) additive jitter drawn per sample
    jitter: dict = field(default_factory=dict)
    size: tuple[int, int, int] = (3, 64, 64)
    contrast: tuple[float, float] = (0.15, 0.25)
    noise: float = 0.04

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown texture kind {self.kind!r}; choose from {KINDS}")
        if len(self.size) != 3 or self.size[0] not in (1, 3):
            raise ConfigError(f"size must be (C, H, W) with C in (1, 3), got {self.size}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size"] = list(self.size)
        d["contrast"] = list(self.contrast)
        d["jitter"] = {k: list(v) for k, v in self.jitter.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TextureSpec":
        d = dict(d)
        d["size"] = tuple(d.get("size", (3, 64, 64)))
        d["contrast"] = tuple(d.get("contrast", (0.15, 0.25)))
        d["jitter"] = {k: tuple(v) for k, v in d.get("jitter", {}).items()}
        return cls(**d)


def default_texture_specs(size: int = 64) -> list[TextureSpec]:
    shape = (3, size, size)
    return [
        TextureSpec(0, "checkerboard", {"period": 4.0}, {"period": (-0.5, 0.5)}, shape),
        TextureSpec(1, "stripes", {"orientation": 30.0, "period": 6.0},
                    {"orientation": (-10.0, 10.0), "period": (-1.0, 1.0)}, shape),
        TextureSpec(2, "correlated_noise", {"length": 2.0}, {"length": (-0.5, 0.5)}, shape),
        TextureSpec(3, "blobs", {"density": 0.01, "radius": 3.0},
                    {"density": (-0.003, 0.003), "radius": (-1.0, 1.0)}, shape),
    ]


def derive_seed(master_seed: int, split: str, class_id: int, index: int) -> int:
    if not 0 <= index < MAX_PER_CLASS:
        raise ConfigError(f"sample index {index} out of range")
    if not 0 <= class_id < MAX_CLASSES:
        raise ConfigError(f"class id {class_id} out of range")
    s = SPLITS.index(split)
    seed = int(master_seed)
    seed = (seed << _SPLIT_BITS) | s
    seed = (seed << _CLASS_BITS) | class_id
    return (seed << _INDEX_BITS) | index


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


def _pattern(kind: str, p: dict, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "checkerboard":
        period = max(p["period"], 1.0)
        oy, ox = rng.uniform(0, 2 * period, size=2)
        return np.where((np.floor((yy + oy) / period) + np.floor((xx + ox) / period)) % 2 == 0, 1.0, -1.0)
    if kind == "stripes":
        theta = np.deg2rad(p["orientation"])
        phase = rng.uniform(0, 2 * np.pi)
        u = xx * np.cos(theta) + yy * np.sin(theta)
        return np.sin(2 * np.pi * u / max(p["period"], 2.0) + phase)
    if kind == "correlated_noise":
        white = rng.normal(size=(h, w))
        return ndimage.gaussian_filter(white, sigma=max(p["length"], 0.5), mode="wrap")
    # blobs
    count = max(1, int(round(p["density"] * h * w)))
    canvas = np.zeros((h, w))
    cy = rng.uniform(0, h, size=count)
    cx = rng.uniform(0, w, size=count)
    radius = max(p["radius"], 1.0)
    for y0, x0 in zip(cy, cx):
        canvas += np.exp(-((yy - y0) ** 2 + (xx - x0) ** 2) / (2 * radius**2))
    return canvas


def render_sample(spec: TextureSpec, seed: int, augment: bool = False) -> np.ndarray:
    """One (C, H, W) float32 image in [0, 1], fully determined by ``seed``."""
    rng = _rng(seed)
    c, h, w = spec.size
    params = dict(spec.params)
    for name, (lo, hi) in sorted(spec.jitter.items()):
        params[name] = params[name] + rng.uniform(lo, hi)
    base = _pattern(spec.kind, params, h, w, rng)
    std = base.std()
    base = (base - base.mean()) / (std if std > 0 else 1.0)
    contrast = rng.uniform(*spec.contrast)
    gains = rng.uniform(0.9, 1.1, size=c)
    img = BASE_LEVEL + contrast * gains[:, None, None] * base[None]
    img = img + spec.noise * rng.normal(size=(c, h, w))
    if augment:
        img = _augment(img, rng)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if rng.uniform() < 0.5:
        img = img[:, :, ::-1]
    if rng.uniform() < 0.5:
        img = img[:, ::-1, :]
    angle = rng.uniform(-15.0, 15.0)
    return ndimage.rotate(img, angle, axes=(2, 1), reshape=False, order=1, mode="reflect")


@dataclass
class LabeledSet:
    images: Tensor4
    labels: np.ndarray
    split: str
    seeds: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ConfigError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


def _normalize_counts(counts) -> dict[str, int]:
    if isinstance(counts, dict):
        out = {s: int(counts[s]) for s in SPLITS}
    else:
        out = dict(zip(SPLITS, (int(c) for c in counts)))
    if len(out) != 3 or any(v < 1 for v in out.values()):
        raise ConfigError(f"need a count >= 1 per class for each split, got {counts}")
    return out


def synth_dataset(specs, counts=(128, 32, 32), master_seed: int = 0):
    """Build balanced ``(train, val, test)`` sets; only train is augmented.

    ``counts`` gives samples per class for each split.
    """
    specs = list(specs)
    if not specs:
        raise ConfigError("empty texture spec set")
    ids = sorted(s.class_id for s in specs)
    if ids != list(range(len(specs))):
        raise ConfigError(f"class ids must be 0..{len(specs) - 1}, got {ids}")
    shapes = {s.size for s in specs}
    if len(shapes) != 1:
        raise ConfigError(f"all classes must share one image size, got {sorted(shapes)}")
    per_class = _normalize_counts(counts)
    specs = sorted(specs, key=lambda s: s.class_id)
    out = []
    for split in SPLITS:
        images, labels, seeds = [], [], []
        for idx in range(per_class[split]):
            for spec in specs:
                seed = derive_seed(master_seed, split, spec.class_id, idx)
                images.append(render_sample(spec, seed, augment=(split == "train")))
                labels.append(spec.class_id)
                seeds.append(seed)
        out.append(LabeledSet(Tensor4(np.stack(images)), np.array(labels), split, np.array(seeds, dtype=np.uint64)))
    return tuple(out)


def export_dataset(sets, out_dir, specs=None, master_seed: int | None = None) -> Path:
    """Write ``<split>_images.npy``/``<split>_labels.npy`` and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "nfp-texture-dataset/1",
        "master_seed": master_seed,
        "specs": [s.to_dict() for s in specs] if specs is not None else None,
        "splits": {},
    }
    for ds in sets:
        write_npy(ds.images, out / f"{ds.split}_images.npy")
        write_array_npy(ds.labels.astype("<i8"), out / f"{ds.split}_labels.npy")
        manifest["splits"][ds.split] = {
            "size": len(ds),
            "class_counts": np.bincount(ds.labels).tolist(),
            "seeds": [int(s) for s in ds.seeds] if ds.seeds is not None else None,
        }
    tmp = out / ".manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2) + "\n")
    os.replace(tmp, out / "manifest.json")
    return out


def load_dataset(directory):
    d = Path(directory)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{d}: missing manifest.json")
    manifest = json.loads(manifest_path.read_text())
    sets = []
    for split in SPLITS:
        if split not in manifest.get("splits", {}):
            raise FormatError(f"{d}: manifest lacks split {split!r}")
        images = read_npy(d / f"{split}_images.npy")
        labels = np.load(d / f"{split}_labels.npy", allow_pickle=False)
        seeds = manifest["splits"][split].get("seeds")
        sets.append(LabeledSet(images, labels, split, None if seeds is None else np.array(seeds, dtype=np.uint64)))
    return tuple(sets)
