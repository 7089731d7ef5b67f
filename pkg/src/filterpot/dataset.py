"""Deterministic synthetic shape-classification data with a shifted variant.

Four 16x16 grayscale classes: horizontal bar, vertical bar, cross, blob.
The shifted split keeps the same shapes but draws a per-image corruption
severity that raises the background level, washes out the shape contrast,
and adds clutter patches plus speckle noise; on top of that a fraction of
images get saturated salt pixels. The rare severe images give the early
conv layers heavy-tailed gradient statistics, mimicking how a domain shift
stresses low-level feature extractors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

IMAGE_SHAPE = (1, 16, 16)
NUM_CLASSES = 4
CLASS_NAMES = ("hbar", "vbar", "cross", "blob")
SPLITS = ("train", "val", "shifted")
DEFAULT_SPLIT_SIZES = {"train": 512, "val": 256, "shifted": 768}

_SPLIT_CODE = {"train": 0, "val": 1, "shifted": 2}

BASE_NOISE_STD = 0.04
SHIFT_BACKGROUND_MAX = 0.50
SHIFT_CONTRAST_RANGE = (0.50, 0.90)
SHIFT_SPECKLE_STD = 0.12
SHIFT_CLUTTER_PATCHES = 2
SHIFT_SALT_PROB = 0.4
SHIFT_SALT_MAX_PIXELS = 5


@dataclass(frozen=True)
class SyntheticDataset:
    seed: int
    split: str
    images: np.ndarray  # (n, 1, 16, 16) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def make_dataset(seed: int, split: str, num_samples: int | None = None) -> SyntheticDataset:
    """Generate a dataset as a pure function of (seed, split, num_samples)."""
    if split not in SPLITS:
        raise ParameterError(f"split must be one of {SPLITS}, got {split!r}")
    n = DEFAULT_SPLIT_SIZES[split] if num_samples is None else int(num_samples)
    if n < 1:
        raise ParameterError(f"num_samples must be >= 1, got {n}")
    rng = np.random.default_rng([int(seed), _SPLIT_CODE[split]])
    reps = -(-n // NUM_CLASSES)
    labels = rng.permutation(np.tile(np.arange(NUM_CLASSES), reps)[:n])
    images = np.empty((n, 1, 16, 16))
    shifted = split == "shifted"
    for i in range(n):
        shape = _render_shape(int(labels[i]), rng)
        intensity = rng.uniform(0.85, 1.0)
        if shifted:
            severity = rng.uniform(0.0, 1.0)
            background = 0.05 + severity * (SHIFT_BACKGROUND_MAX - 0.05)
            lo, hi = SHIFT_CONTRAST_RANGE
            contrast = hi - severity * (hi - lo)
            img = background + contrast * intensity * shape
            for _ in range(SHIFT_CLUTTER_PATCHES):
                r, c = rng.integers(0, 13, size=2)
                size = int(rng.integers(2, 4))
                img[r : r + size, c : c + size] += rng.uniform(0.3, 0.8) * severity
            img += rng.normal(0.0, SHIFT_SPECKLE_STD * severity + 0.02, (16, 16))
            if rng.uniform() < SHIFT_SALT_PROB:
                k = int(rng.integers(1, SHIFT_SALT_MAX_PIXELS + 1))
                rr = rng.integers(0, 16, size=k)
                cc = rng.integers(0, 16, size=k)
                img[rr, cc] = rng.uniform(0.9, 1.0, size=k)
        else:
            img = intensity * shape + rng.normal(0.0, BASE_NOISE_STD, (16, 16))
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return SyntheticDataset(seed=int(seed), split=split, images=images, labels=labels)


def _render_shape(label: int, rng: np.random.Generator) -> np.ndarray:
    img = np.zeros((16, 16))
    if label == 0:  # horizontal bar
        row = int(rng.integers(3, 12))
        thickness = int(rng.integers(2, 4))
        img[row : row + thickness, 2:14] = 1.0
    elif label == 1:  # vertical bar
        col = int(rng.integers(3, 12))
        thickness = int(rng.integers(2, 4))
        img[2:14, col : col + thickness] = 1.0
    elif label == 2:  # cross
        row = int(rng.integers(4, 11))
        col = int(rng.integers(4, 11))
        img[row : row + 2, 2:14] = 1.0
        img[2:14, col : col + 2] = 1.0
    elif label == 3:  # filled blob
        cy, cx = rng.integers(5, 11, size=2)
        radius = rng.uniform(2.0, 3.2)
        yy, xx = np.ogrid[:16, :16]
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2] = 1.0
    else:
        raise ParameterError(f"label must be in [0, {NUM_CLASSES}), got {label}")
    return img
