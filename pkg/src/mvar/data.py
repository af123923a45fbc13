"""Synthetic class-conditional images: one geometric primitive per class."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SHAPES = (
    "square",
    "disk",
    "ring",
    "hbar",
    "vbar",
    "diagonal",
    "antidiagonal",
    "plus",
    "cross",
    "checker",
)

_SPLITS = {"train": 0, "val": 1}


def _shape_mask(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    # normalised coordinates in [-1, 1] around a jittered centre
    cy = (h - 1) / 2 + rng.uniform(-0.15, 0.15) * h
    cx = (w - 1) / 2 + rng.uniform(-0.15, 0.15) * w
    u = (x - cx) / (w / 2)
    v = (y - cy) / (h / 2)
    size = rng.uniform(0.5, 0.8)
    thick = rng.uniform(0.2, 0.35)
    if kind == "square":
        return (np.abs(u) <= size) & (np.abs(v) <= size)
    if kind == "disk":
        return u**2 + v**2 <= size**2
    if kind == "ring":
        r = np.sqrt(u**2 + v**2)
        return (r <= size + 0.15) & (r >= size - 0.25)
    if kind == "hbar":
        return np.abs(v) <= thick
    if kind == "vbar":
        return np.abs(u) <= thick
    if kind == "diagonal":
        return np.abs(u - v) <= thick * 1.4
    if kind == "antidiagonal":
        return np.abs(u + v) <= thick * 1.4
    if kind == "plus":
        return (np.abs(u) <= thick) | (np.abs(v) <= thick)
    if kind == "cross":
        return (np.abs(u - v) <= thick * 1.2) | (np.abs(u + v) <= thick * 1.2)
    if kind == "checker":
        period = max(2, h // 4)
        return ((y // period + x // period) % 2) == 0
    raise ValueError(kind)


def render(label: int, size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """One (h, w, 3) image in [0, 1] for class ``label``."""
    h, w = size
    kind = SHAPES[label % len(SHAPES)]
    mask = _shape_mask(kind, h, w, rng)
    background = rng.uniform(0.0, 0.35, size=3)
    foreground = rng.uniform(0.55, 1.0, size=3)
    img = np.where(mask[..., None], foreground, background)
    return np.clip(img, 0.0, 1.0)


@dataclass
class SyntheticDataset:
    class_count: int = 10
    size: tuple[int, int] = (8, 8)
    train_size: int = 1600
    val_size: int = 160
    seed: int = 0

    def __post_init__(self):
        self.size = tuple(self.size)
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def split(self, name: str = "train") -> tuple[np.ndarray, np.ndarray]:
        """Images (n, h, w, 3) and labels (n,) of a split; deterministic in ``seed``."""
        if name not in self._cache:
            n = self.train_size if name == "train" else self.val_size
            images = np.empty((n,) + self.size + (3,))
            labels = np.empty(n, dtype=np.int64)
            for i in range(n):
                rng = np.random.default_rng([self.seed, _SPLITS[name], i])
                labels[i] = i % self.class_count
                images[i] = render(int(labels[i]), self.size, rng)
            self._cache[name] = (images, labels)
        return self._cache[name]
