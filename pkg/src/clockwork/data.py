"""Procedural class-conditional toy images: coloured shapes on a textured background.

Class ``k`` in ``0..15`` picks shape ``k // 4`` (disk, square, triangle, ring) and
colour ``k % 4`` (red, green, blue, yellow).  Every image is a pure function of
``(class, seed)``; pixel values lie in [-1, 1].
"""

from __future__ import annotations

import numpy as np
import torch

NUM_CLASSES = 16
SHAPES = ("disk", "square", "triangle", "ring")
COLORS = np.array([
    [0.9, 0.15, 0.1],
    [0.1, 0.8, 0.2],
    [0.15, 0.3, 0.95],
    [0.95, 0.85, 0.1],
])


def toy_image(label: int, seed: int, size: int = 32) -> np.ndarray:
    """One (3, size, size) float32 image in [-1, 1]."""
    if not 0 <= label < NUM_CLASSES:
        raise ValueError(f"label {label} outside 0..{NUM_CLASSES - 1}")
    rng = np.random.default_rng([label, seed])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size

    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(3.0, 6.0)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    base = rng.uniform(0.35, 0.55)
    background = base + 0.08 * stripes + 0.03 * rng.standard_normal((size, size))
    img = np.repeat(background[None], 3, axis=0)

    cx, cy = rng.uniform(0.35, 0.65, size=2)
    r = rng.uniform(0.2, 0.3)
    dx, dy = xx + 0.5 / size - cx, yy + 0.5 / size - cy
    shape = SHAPES[label // 4]
    if shape == "disk":
        mask = dx ** 2 + dy ** 2 <= r ** 2
    elif shape == "square":
        mask = (np.abs(dx) <= 0.85 * r) & (np.abs(dy) <= 0.85 * r)
    elif shape == "triangle":
        mask = (dy <= 0.8 * r) & (dy >= -r + 2 * np.abs(dx) * 1.1)
    else:
        d2 = dx ** 2 + dy ** 2
        mask = (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    color = COLORS[label % 4] * rng.uniform(0.85, 1.0)
    img[:, mask] = color[:, None]
    return (np.clip(img, 0, 1) * 2 - 1).astype(np.float32)


def toy_batch(labels, seeds, size: int = 32) -> torch.Tensor:
    return torch.from_numpy(np.stack([toy_image(int(l), int(s), size) for l, s in zip(labels, seeds)]))


class ToyDataset:
    """Infinite stream of toy images; ``sample`` is deterministic in its generator."""

    def __init__(self, size: int = 32, num_classes: int = NUM_CLASSES, pool: int | None = None):
        self.size = size
        self.num_classes = num_classes
        self.pool = pool  # restrict to ``pool`` fixed (label, seed) pairs, e.g. for overfitting

    def sample(self, n: int, gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
        if self.pool is not None:
            idx = torch.randint(0, self.pool, (n,), generator=gen)
            labels = idx % self.num_classes
            seeds = idx
        else:
            labels = torch.randint(0, self.num_classes, (n,), generator=gen)
            seeds = torch.randint(0, 2 ** 31 - 1, (n,), generator=gen)
        return toy_batch(labels.tolist(), seeds.tolist(), self.size), labels


def reference_set(n: int, size: int = 32, seed: int = 12345, num_classes: int = NUM_CLASSES) -> tuple[torch.Tensor, torch.Tensor]:
    """Held-out real images with balanced labels, used as the quality reference."""
    labels = torch.arange(n) % num_classes
    seeds = seed * 100003 + torch.arange(n)
    return toy_batch(labels.tolist(), seeds.tolist(), size), labels
