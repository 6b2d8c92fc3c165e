"""Procedural data for smoke benchmarks: toy HR images and labelled textures."""

from __future__ import annotations

import numpy as np

from texsr.images import ImageBuffer
from texsr.ptpm import PatchRecord

TEXTURE_CLASSES = ("checker", "hstripes", "vstripes", "noise")


def _colors(rng, n=2):
    c = rng.uniform(0.1, 0.9, size=(n, 3))
    # keep the two tones visibly apart
    while n == 2 and np.abs(c[0] - c[1]).mean() < 0.25:
        c = rng.uniform(0.1, 0.9, size=(n, 3))
    return c


def texture(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    a, b = _colors(rng)
    if kind == "checker":
        p = int(rng.integers(3, 7))
        oy, ox = rng.integers(0, 2 * p, size=2)
        sel = (((yy + oy) // p + (xx + ox) // p) % 2).astype(bool)
    elif kind == "hstripes":
        p = int(rng.integers(3, 8))
        sel = ((yy + rng.integers(0, 2 * p)) // p % 2).astype(bool)
    elif kind == "vstripes":
        p = int(rng.integers(3, 8))
        sel = ((xx + rng.integers(0, 2 * p)) // p % 2).astype(bool)
    elif kind == "noise":
        base = rng.uniform(0.2, 0.8, size=3)
        return np.clip(base + rng.normal(0, 0.18, size=(size, size, 3)), 0, 1)
    else:
        raise ValueError(f"unknown texture kind {kind!r}")
    img = np.where(sel[..., None], a, b)
    return np.clip(img + rng.normal(0, 0.02, size=img.shape), 0, 1)


def texture_dataset(n_per_class: int = 200, size: int = 32, seed: int = 0) -> list[PatchRecord]:
    """Four-class texture patches, each from its own source id."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_per_class):
        for label, kind in enumerate(TEXTURE_CLASSES):
            out.append(PatchRecord(texture(kind, size, rng), label, f"syn-{label}-{i:05d}", 1.0))
    return out


def segmented_scene(size: int = 128, cells: int = 4, seed: int = 0):
    """A size x size mosaic of texture regions and its label mask.

    Region borders are jittered so some grid patches straddle two labels.
    """
    rng = np.random.default_rng(seed)
    cell = size // cells
    img = np.zeros((size, size, 3))
    mask = np.zeros((size, size), dtype=np.int64)
    jitter = rng.integers(-cell // 4, cell // 4 + 1, size=(cells + 1, 2))
    jitter[0] = jitter[-1] = 0
    bounds_y = [int(np.clip(i * cell + jitter[i, 0], 0, size)) for i in range(cells + 1)]
    bounds_x = [int(np.clip(i * cell + jitter[i, 1], 0, size)) for i in range(cells + 1)]
    bounds_y[-1] = bounds_x[-1] = size
    for r in range(cells):
        for c in range(cells):
            label = int(rng.integers(len(TEXTURE_CLASSES)))
            tex = texture(TEXTURE_CLASSES[label], size, rng)
            ys, ye, xs, xe = bounds_y[r], bounds_y[r + 1], bounds_x[c], bounds_x[c + 1]
            img[ys:ye, xs:xe] = tex[ys:ye, xs:xe]
            mask[ys:ye, xs:xe] = label
    return ImageBuffer(img), mask


def toy_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth color field with a few shapes and one low-frequency stripe patch."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    c0, c1, c2 = rng.uniform(0.15, 0.85, size=(3, 3))
    ang = rng.uniform(0, 2 * np.pi)
    t = np.cos(ang) * xx + np.sin(ang) * yy
    t = (t - t.min()) / (np.ptp(t) + 1e-9)
    img = c0 * (1 - t[..., None]) + c1 * t[..., None]
    for _ in range(int(rng.integers(2, 4))):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        ry, rx = rng.uniform(0.08, 0.25, size=2)
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        img[inside] = rng.uniform(0.05, 0.95, size=3)
    # one striped rectangle; period >= 8 px so it survives x4 downsampling
    h, w = rng.integers(size // 4, size // 2, size=2)
    y0, x0 = rng.integers(0, size - h), rng.integers(0, size - w)
    period = int(rng.integers(8, 13))
    stripes = ((np.arange(w) // (period // 2)) % 2).astype(bool)
    patch = np.where(stripes[None, :, None], c2, 1 - c2)
    img[y0:y0 + h, x0:x0 + w] = patch
    return np.clip(img, 0, 1)


def toy_hr_images(n: int = 16, size: int = 64, seed: int = 0) -> list[ImageBuffer]:
    rng = np.random.default_rng(seed)
    return [ImageBuffer(toy_image(size, rng)) for _ in range(n)]


def labelled_toy_images(n_per_class: int = 32, size: int = 64, seed: int = 0) -> list[PatchRecord]:
    """Whole-image texture samples used to train the global image prior."""
    return texture_dataset(n_per_class, size, seed)
