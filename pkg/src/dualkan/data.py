"""Procedural texture datasets whose classes differ in second-order statistics."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

__all__ = [
    "DataConfigError",
    "ClassSpec",
    "DatasetSpec",
    "Dataset",
    "gen_synthetic_dataset",
    "dataset_hash",
    "write_dataset",
    "read_manifest",
    "baseline_features",
]

FAMILIES = ("stripes", "checker", "noise", "blotch")

DEFAULT_CLASSES = (
    ("stripes", {"angle": 30.0, "frequency": 6.0}),
    ("checker", {"cell": 8.0}),
    ("noise", {"slope": 0.5}),
    ("blotch", {"sigma": 6.0}),
)

# both ends of the color ramp, shared by every class so color alone is uninformative
_DARK = np.array([0.15, 0.18, 0.28])
_LIGHT = np.array([0.92, 0.85, 0.62])


class DataConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ClassSpec:
    family: str
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DataConfigError(f"unknown texture family {self.family!r}")


@dataclass(frozen=True)
class DatasetSpec:
    classes: Tuple[ClassSpec, ...] = tuple(ClassSpec(f, p) for f, p in DEFAULT_CLASSES)
    per_class: int = 100
    size: int = 64
    jitter: float = 1.0

    def __post_init__(self):
        if len(self.classes) < 2:
            raise DataConfigError("need at least two classes")
        if self.per_class < 1 or self.size < 8:
            raise DataConfigError("per_class must be >= 1 and size >= 8")
        if not 0 <= self.jitter <= 1:
            raise DataConfigError(f"jitter must lie in [0, 1], got {self.jitter}")

    @classmethod
    def default(cls, num_classes: int = 4, **kw) -> "DatasetSpec":
        if not 2 <= num_classes <= len(DEFAULT_CLASSES):
            raise DataConfigError(
                f"default spec provides 2..{len(DEFAULT_CLASSES)} classes, asked for {num_classes}"
            )
        return cls(tuple(ClassSpec(f, p) for f, p in DEFAULT_CLASSES[:num_classes]), **kw)


@dataclass
class Dataset:
    images: np.ndarray  # N × 3 × H × W float32 in [0, 1]
    labels: np.ndarray  # N int64
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)


def _smooth_noise(rng, size: int, sigma: float) -> np.ndarray:
    from scipy.ndimage import gaussian_filter

    f = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def _field(rng, family: str, params: Dict[str, float], size: int, jitter: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if family == "stripes":
        angle = np.deg2rad(params.get("angle", 30.0) + 10.0 * jitter * rng.uniform(-1, 1))
        freq = params.get("frequency", 6.0) * (1 + 0.15 * jitter * rng.uniform(-1, 1))
        phase = rng.uniform(0, 2 * np.pi)
        t = np.cos(2 * np.pi * freq / size * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
        return 0.5 + 0.5 * t
    if family == "checker":
        cell = params.get("cell", 8.0) * (1 + 0.15 * jitter * rng.uniform(-1, 1))
        rot = np.deg2rad(8.0 * jitter * rng.uniform(-1, 1))
        ox, oy = rng.uniform(0, 2 * cell, size=2)
        u = xx * np.cos(rot) + yy * np.sin(rot) + ox
        v = -xx * np.sin(rot) + yy * np.cos(rot) + oy
        t = np.sin(np.pi * u / cell) * np.sin(np.pi * v / cell)
        return 0.5 + 0.5 * np.tanh(4 * t)
    if family == "noise":
        slope = params.get("slope", 0.5) + 0.2 * jitter * rng.uniform(-1, 1)
        fy = np.fft.fftfreq(size)[:, None]
        fx = np.fft.fftfreq(size)[None, :]
        radius = np.sqrt(fx ** 2 + fy ** 2)
        radius[0, 0] = 1.0
        spec = np.fft.fft2(rng.standard_normal((size, size))) / radius ** slope
        spec[0, 0] = 0
        f = np.real(np.fft.ifft2(spec))
        f = f / (f.std() + 1e-12)
        return np.clip(0.5 + 0.2 * f, 0, 1)
    if family == "blotch":
        sigma = params.get("sigma", 6.0) * (1 + 0.2 * jitter * rng.uniform(-1, 1))
        f = _smooth_noise(rng, size, sigma)
        return 1 / (1 + np.exp(-2.5 * f))
    raise DataConfigError(f"unknown texture family {family!r}")


def _render(rng, cls: ClassSpec, size: int, jitter: float) -> np.ndarray:
    t = _field(rng, cls.family, cls.params, size, jitter)
    dark = np.clip(_DARK + 0.25 * jitter * rng.uniform(-1, 1, 3), 0, 1)
    light = np.clip(_LIGHT + 0.25 * jitter * rng.uniform(-1, 1, 3), 0, 1)
    img = dark[:, None, None] * (1 - t) + light[:, None, None] * t
    # quantize so in-memory data matches what a PNG round trip yields
    return np.round(np.clip(img, 0, 1) * 255) / 255


def gen_synthetic_dataset(spec: DatasetSpec, seed: int, split: int = 0) -> Dataset:
    """Deterministic labeled texture set, ``per_class`` images per class.

    Different ``split`` values give disjoint draws from the same seed.
    """
    images: List[np.ndarray] = []
    labels: List[int] = []
    for label, cls in enumerate(spec.classes):
        for i in range(spec.per_class):
            rng = np.random.default_rng([seed, split, label, i])
            images.append(_render(rng, cls, spec.size, spec.jitter))
            labels.append(label)
    return Dataset(np.stack(images).astype(np.float32), np.asarray(labels, dtype=np.int64),
                   len(spec.classes))


def dataset_hash(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.images).tobytes())
    h.update(np.ascontiguousarray(ds.labels).tobytes())
    return h.hexdigest()


def write_dataset(ds: Dataset, root: str, name: str) -> str:
    """Write PNGs under ``root/name/`` and a ``name.tsv`` manifest; return its path."""
    from PIL import Image

    os.makedirs(os.path.join(root, name), exist_ok=True)
    lines = []
    for i, (img, label) in enumerate(zip(ds.images, ds.labels)):
        rel = f"{name}/{i:06d}.png"
        arr = np.round(np.transpose(img, (1, 2, 0)) * 255).astype(np.uint8)
        Image.fromarray(arr, "RGB").save(os.path.join(root, rel))
        lines.append(f"{rel}\t{int(label)}\n")
    manifest = os.path.join(root, f"{name}.tsv")
    with open(manifest, "w", encoding="utf-8") as f:
        f.writelines(lines)
    return manifest


def read_manifest(path: str, num_classes: int = 0) -> Dataset:
    from PIL import Image

    root = os.path.dirname(os.path.abspath(path))
    images, labels = [], []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            try:
                rel, label = line.split("\t")
                label = int(label)
            except ValueError:
                raise DataConfigError(f"{path}:{lineno}: expected 'path<TAB>label'") from None
            with Image.open(os.path.join(root, rel)) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            images.append(np.transpose(arr, (2, 0, 1)))
            labels.append(label)
    if not images:
        raise DataConfigError(f"{path}: empty manifest")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataConfigError(f"{path}: images differ in size {sorted(shapes)}")
    labels = np.asarray(labels, dtype=np.int64)
    return Dataset(np.stack(images), labels, max(num_classes, int(labels.max()) + 1))


def baseline_features(images: np.ndarray, bins: int = 8) -> np.ndarray:
    """Channel means, magnitude-weighted gradient-orientation histogram, and
    mean gradient magnitude for each image."""
    gray = images.mean(axis=1)
    gy, gx = np.gradient(gray, axis=(1, 2))
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    idx = np.minimum((ang / np.pi * bins).astype(int), bins - 1)
    n = images.shape[0]
    hist = np.zeros((n, bins))
    for b in range(bins):
        hist[:, b] = (mag * (idx == b)).mean(axis=(1, 2))
    total = hist.sum(axis=1, keepdims=True)
    return np.concatenate([images.mean(axis=(2, 3)), hist / (total + 1e-12), total], axis=1)
