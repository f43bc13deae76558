"""Synthetic salient-patch classification data.

Each image is dim uniform noise with one bright 16x16 striped patch at a
random position. The stripes are hard bars (two levels, 0.4 and 1.0) whose
orientation (vary along x or y) and frequency (1..5 bar cycles per patch)
encode the class; position carries no label information, so a classifier
must find the patch and resolve its texture. Bars are sampled at pixel
centers of a cosine fixed in the patch frame, which makes every patch
exactly mirror-symmetric: horizontal flips reproduce the same texture at
the mirrored location, so flip augmentation never changes a label.

Generation is a pure function of the seed: sample i draws from a
counter-based stream keyed (seed, i), independent of generation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .rng import sample_rng

PATCH = 16
NOISE_AMPLITUDE = 0.3
PATCH_LO = 0.4
PATCH_HI = 1.0


@dataclass
class Dataset:
    """Images [n, size, size, 3] float32 in [0, 1]; labels [n] uint8.

    ``boxes`` holds each patch's top-left (y, x) corner for mask-based
    diagnostics; it is populated by the generator and absent (None) for
    datasets loaded from disk.
    """

    images: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)


def _texture(label: int) -> np.ndarray:
    """16x16 bar patch: orientation = label % 2, frequency = 1 + label // 2.

    Pixel centers (t + 0.5) never land on a zero crossing for frequencies
    1..5, so each bar is a clean two-level stripe with no midpoint pixels.
    """
    freq = 1 + label // 2
    t = np.arange(PATCH, dtype=np.float64) + 0.5
    bars = np.where(np.cos(2.0 * np.pi * freq * t / PATCH) > 0.0, PATCH_HI, PATCH_LO)
    if label % 2 == 0:
        return np.tile(bars, (PATCH, 1))      # varies along x
    return np.tile(bars[:, None], (1, PATCH))  # varies along y


def gen_salient_dataset(seed: int, n: int, classes: int = 10, size: int = 64) -> Dataset:
    """Build n images of one bright textured patch on a noise background."""
    if not 2 <= classes <= 10:
        raise ContractError(f"classes must be in [2, 10], got {classes}")
    if size < 32:
        raise ContractError(f"size must be at least 32, got {size}")
    images = np.empty((n, size, size, 3), dtype=np.float32)
    labels = np.empty(n, dtype=np.uint8)
    boxes = np.empty((n, 2), dtype=np.int32)
    span = size - PATCH + 1
    for i in range(n):
        gen = sample_rng(seed, i)
        label = int(gen.integers(classes))
        y0 = int(gen.integers(span))
        x0 = int(gen.integers(span))
        img = gen.uniform(0.0, NOISE_AMPLITUDE, size=(size, size))
        img[y0 : y0 + PATCH, x0 : x0 + PATCH] = _texture(label)
        images[i] = img.astype(np.float32)[:, :, None]
        labels[i] = label
        boxes[i] = (y0, x0)
    return Dataset(images=images, labels=labels, boxes=boxes)


def patch_mask(box, size: int) -> np.ndarray:
    """Binary [size, size] mask of the 16x16 patch at top-left ``box`` = (y, x)."""
    y0, x0 = int(box[0]), int(box[1])
    mask = np.zeros((size, size), dtype=np.float64)
    mask[y0 : y0 + PATCH, x0 : x0 + PATCH] = 1.0
    return mask


def grid_mask(box, size: int, grid: int) -> np.ndarray:
    """Patch coverage fraction per token cell on a grid x grid layout."""
    mask = patch_mask(box, size)
    cell = size // grid
    return mask.reshape(grid, cell, grid, cell).mean(axis=(1, 3))
