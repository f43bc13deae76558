"""Synthetic dataset generator: determinism, class balance, and saliency contract."""

import numpy as np
import pytest

from guideformer.data import (PATCH, Dataset, gen_salient_dataset, grid_mask, patch_mask)
from guideformer.errors import ContractError


def test_same_seed_is_bit_identical():
    a = gen_salient_dataset(seed=7, n=64, classes=10, size=64)
    b = gen_salient_dataset(seed=7, n=64, classes=10, size=64)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.boxes, b.boxes)


def test_different_seeds_differ():
    a = gen_salient_dataset(seed=0, n=16, classes=10, size=64)
    b = gen_salient_dataset(seed=1, n=16, classes=10, size=64)
    assert not np.array_equal(a.images, b.images)


def test_samples_are_independent_of_dataset_size():
    # sample i is a pure function of (seed, i): prefixes agree
    a = gen_salient_dataset(seed=3, n=8, classes=10, size=64)
    b = gen_salient_dataset(seed=3, n=32, classes=10, size=64)
    assert np.array_equal(a.images, b.images[:8])
    assert np.array_equal(a.labels, b.labels[:8])


def test_class_histogram_is_uniform_within_5_percent():
    ds = gen_salient_dataset(seed=0, n=10000, classes=10, size=32)
    freq = np.bincount(ds.labels, minlength=10) / len(ds)
    assert np.all(np.abs(freq - 0.1) < 0.05)


def test_pixels_bounded_and_finite():
    ds = gen_salient_dataset(seed=5, n=32, classes=10, size=64)
    assert np.all(np.isfinite(ds.images))
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert ds.images.shape == (32, 64, 64, 3)
    assert ds.images.dtype == np.float32
    # grayscale content replicated across the three channels
    assert np.array_equal(ds.images[..., 0], ds.images[..., 1])
    assert np.array_equal(ds.images[..., 0], ds.images[..., 2])


def test_patch_mean_exceeds_background_mean_by_margin():
    ds = gen_salient_dataset(seed=2, n=128, classes=10, size=64)
    for i in range(len(ds)):
        y0, x0 = ds.boxes[i]
        img = ds.images[i, :, :, 0].astype(np.float64)
        inside = img[y0 : y0 + PATCH, x0 : x0 + PATCH].mean()
        sel = np.ones((64, 64), dtype=bool)
        sel[y0 : y0 + PATCH, x0 : x0 + PATCH] = False
        assert inside >= img[sel].mean() + 0.3


def test_every_patch_pixel_outshines_background():
    ds = gen_salient_dataset(seed=4, n=32, classes=10, size=64)
    for i in range(len(ds)):
        y0, x0 = ds.boxes[i]
        img = ds.images[i, :, :, 0]
        assert img[y0 : y0 + PATCH, x0 : x0 + PATCH].min() > 0.3 - 1e-6


def test_texture_encodes_label_and_position_does_not():
    # two samples with the same label show the same patch content at
    # different locations (up to finding two such samples)
    ds = gen_salient_dataset(seed=8, n=256, classes=10, size=64)
    by_label = {}
    for i in range(len(ds)):
        by_label.setdefault(int(ds.labels[i]), []).append(i)
    checked = 0
    for label, idxs in by_label.items():
        if len(idxs) < 2:
            continue
        i, j = idxs[0], idxs[1]
        yi, xi = ds.boxes[i]
        yj, xj = ds.boxes[j]
        pi = ds.images[i, yi : yi + PATCH, xi : xi + PATCH, 0]
        pj = ds.images[j, yj : yj + PATCH, xj : xj + PATCH, 0]
        assert np.array_equal(pi, pj), f"label {label} patches differ"
        checked += 1
    assert checked >= 8


def test_horizontal_flip_preserves_patch_content():
    # every texture is mirror-symmetric, so a flipped image contains the
    # identical patch at the mirrored location — labels survive augmentation
    ds = gen_salient_dataset(seed=9, n=64, classes=10, size=64)
    for i in range(len(ds)):
        y0, x0 = ds.boxes[i]
        flipped = ds.images[i, :, ::-1, 0]
        xf = 64 - PATCH - x0
        orig_patch = ds.images[i, y0 : y0 + PATCH, x0 : x0 + PATCH, 0]
        flip_patch = flipped[y0 : y0 + PATCH, xf : xf + PATCH]
        assert np.array_equal(orig_patch, flip_patch)


def test_distinct_labels_have_distinct_textures():
    ds = gen_salient_dataset(seed=11, n=256, classes=10, size=64)
    seen = {}
    for i in range(len(ds)):
        y0, x0 = ds.boxes[i]
        key = ds.images[i, y0 : y0 + PATCH, x0 : x0 + PATCH, 0].tobytes()
        label = int(ds.labels[i])
        assert seen.setdefault(key, label) == label
    assert len(seen) == 10


def test_generator_rejects_bad_arguments():
    with pytest.raises(ContractError):
        gen_salient_dataset(seed=0, n=4, classes=11, size=64)
    with pytest.raises(ContractError):
        gen_salient_dataset(seed=0, n=4, classes=1, size=64)
    with pytest.raises(ContractError):
        gen_salient_dataset(seed=0, n=4, classes=10, size=16)


def test_patch_mask_marks_exactly_the_patch():
    mask = patch_mask((5, 9), 32)
    assert mask.sum() == PATCH * PATCH
    assert mask[5, 9] == 1.0 and mask[5 + PATCH - 1, 9 + PATCH - 1] == 1.0
    assert mask[4, 9] == 0.0 and mask[5, 8] == 0.0


def test_grid_mask_is_coverage_fraction():
    mask = grid_mask((0, 0), 64, 16)  # 4x4-pixel cells, patch covers 4x4 cells
    assert mask[:4, :4].min() == 1.0
    assert mask[4:, :].max() == 0.0 and mask[:, 4:].max() == 0.0
    # off-grid placement gives fractional coverage, total preserved
    frac = grid_mask((2, 2), 64, 16)
    assert np.isclose(frac.sum(), (PATCH * PATCH) / 16.0)
    assert 0.0 < frac[0, 0] < 1.0


def test_dataset_len():
    ds = Dataset(images=np.zeros((5, 32, 32, 3), np.float32), labels=np.zeros(5, np.uint8))
    assert len(ds) == 5
