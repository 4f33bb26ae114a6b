"""Procedural multi-task image data.

Each task draws from its own family of class templates; an image is its
class template plus Gaussian pixel noise.  Image ``i`` has label
``i % num_classes`` and the noise stream is prefix-stable, so sample ``i``
depends only on ``(spec, split, i)``.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from vitmerge import ConfigError, DataError
from vitmerge.numkit import STORAGE_DTYPE

SPLITS = {"train": 0, "test": 1}


def _grid(size):
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy - c, xx - c


def _bars(c, n, size):
    # a line through the centre, orientation varies with class
    y, x = _grid(size)
    theta = np.pi * c / n
    d = x * np.sin(theta) - y * np.cos(theta)
    return 2.0 * np.exp(-d ** 2 / 2.0) - 0.5


def _blobs(c, n, size):
    y, x = _grid(size)
    angle = 2 * np.pi * c / n
    r = size / 4.0
    cy, cx = r * np.sin(angle), r * np.cos(angle)
    return 2.5 * np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * (size / 6.0) ** 2)) - 0.6


def _checker(c, n, size):
    y, x = _grid(size)
    period = 2.0 + c
    return np.sign(np.sin(np.pi * (x + 0.5) / period) * np.sin(np.pi * (y + 0.5) / period)) * 0.8


def _rings(c, n, size):
    y, x = _grid(size)
    r = np.sqrt(x ** 2 + y ** 2)
    radius = 1.5 + c * (size / 2.0 - 2.5) / max(n - 1, 1)
    return 2.0 * np.exp(-(r - radius) ** 2 / 1.0) - 0.4


def _waves(c, n, size):
    y, x = _grid(size)
    freq = (c + 1) / size
    return np.cos(2 * np.pi * freq * (x + 0.7 * y))


# per-family background level; families differ in global statistics the way
# real datasets do, which is what makes task identification easy
FAMILY_OFFSET = {"bars": -0.6, "blobs": 0.6, "checker": 0.0, "rings": -1.2, "waves": 1.2}

FAMILIES: Dict[str, Callable[[int, int, int], np.ndarray]] = {
    "bars": _bars,
    "blobs": _blobs,
    "checker": _checker,
    "rings": _rings,
    "waves": _waves,
}


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task_id: int
    num_classes: int = 4
    family: str = "bars"
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown image family {self.family!r}; choose from {sorted(FAMILIES)}")
        if self.num_classes < 2:
            raise ConfigError("a task needs at least 2 classes")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    images: np.ndarray
    labels: Optional[np.ndarray]
    split: str
    task_id: int = 0
    num_classes: int = 0

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, self.split, self.task_id, self.num_classes)

    def unlabeled(self) -> "Dataset":
        return Dataset(self.images, None, self.split, self.task_id, self.num_classes)


def templates(spec: SyntheticTaskSpec, image_size: int = 16, channels: int = 1) -> np.ndarray:
    """Noise-free class templates, shape ``(num_classes, channels, H, W)``."""
    fn = FAMILIES[spec.family]
    out = np.empty((spec.num_classes, channels, image_size, image_size), dtype=np.float64)
    for c in range(spec.num_classes):
        base = fn(c, spec.num_classes, image_size) + FAMILY_OFFSET[spec.family]
        for ch in range(channels):
            # channels differ by a fixed gain so multi-channel inputs stay informative
            out[c, ch] = base * (1.0 - 0.25 * ch)
    return out.astype(STORAGE_DTYPE)


def generate(spec: SyntheticTaskSpec, split: str, n: int, image_size: int = 16, channels: int = 1) -> Dataset:
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {sorted(SPLITS)}")
    if n < spec.num_classes:
        raise DataError(f"need at least {spec.num_classes} samples, got {n}")
    tpl = templates(spec, image_size, channels)
    labels = np.arange(n, dtype=np.int64) % spec.num_classes
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, SPLITS[split], spec.task_id]))
    noise = rng.standard_normal((n, channels, image_size, image_size)).astype(STORAGE_DTYPE)
    images = tpl[labels] + np.float32(spec.noise_std) * noise
    return Dataset(images, labels, split, spec.task_id, spec.num_classes)


def nearest_template_predict(images: np.ndarray, tpl: np.ndarray) -> np.ndarray:
    flat = images.reshape(len(images), -1).astype(np.float64)
    t = tpl.reshape(len(tpl), -1).astype(np.float64)
    d = ((flat[:, None, :] - t[None]) ** 2).sum(-1)
    return d.argmin(axis=1)


def gate_split(test: Dataset, frac: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Random ``frac`` share of a test split for gate/gram data, plus the rest.

    The first element is unlabeled (task id kept); the second keeps labels
    and is used for held-out gate accuracy.
    """
    if not 0.0 < frac <= 1.0:
        raise ConfigError("gate fraction must lie in (0, 1]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919, test.task_id]))
    order = rng.permutation(len(test))
    k = max(1, int(np.floor(frac * len(test))))
    pool, rest = np.sort(order[:k]), np.sort(order[k:])
    return test.subset(pool).unlabeled(), test.subset(rest)


def joint_dataset(parts) -> Tuple[Dataset, list]:
    """Concatenate labeled datasets into one joint label space.

    Returns the joint set and per-task label offsets.
    """
    offsets, images, labels = [], [], []
    off = 0
    for ds in parts:
        offsets.append(off)
        images.append(ds.images)
        labels.append(ds.labels + off)
        off += ds.num_classes
    return Dataset(np.concatenate(images), np.concatenate(labels), parts[0].split, 0, off), offsets
