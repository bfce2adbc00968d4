"""Synthetic supervision: colored shapes on a noisy background.

Shape colors are random and deliberately uncorrelated with the class, so the
classifier has to read geometry, not palette. Class ids: 0 background,
1 rectangle, 2 disk, 3 triangle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ContractError
from .segmentation import Image

N_SHAPE_CLASSES = 3
NOISE_SIGMA = 0.05
MIN_SHAPE_AREA = 16
MIN_COLOR_DIST = 0.35


@dataclass
class SyntheticSample:
    image: Image
    pixel_labels: np.ndarray  # (H, W) int64 in [0, N_SHAPE_CLASSES]


def _pick_color(rng: np.random.Generator, taken: list[np.ndarray]) -> np.ndarray:
    for _ in range(200):
        c = rng.uniform(0.0, 1.0, size=3)
        if all(np.linalg.norm(c - t) >= MIN_COLOR_DIST for t in taken):
            return c
    return c  # crowded palette: accept the last draw


def _draw_rectangle(rng, size, mask):
    w = int(rng.integers(4, max(5, size // 2)))
    h = int(rng.integers(4, max(5, size // 2)))
    x0 = int(rng.integers(0, size - w + 1))
    y0 = int(rng.integers(0, size - h + 1))
    mask[y0 : y0 + h, x0 : x0 + w] = True


def _draw_disk(rng, size, mask):
    r = float(rng.uniform(2.5, max(3.0, size / 4)))
    margin = int(np.ceil(r))
    cx = float(rng.uniform(margin, size - margin))
    cy = float(rng.uniform(margin, size - margin))
    ys, xs = np.mgrid[0:size, 0:size]
    mask[(xs - cx) ** 2 + (ys - cy) ** 2 <= r * r] = True


def _draw_triangle(rng, size, mask):
    ys, xs = np.mgrid[0:size, 0:size]
    for _ in range(100):
        span = int(rng.integers(8, max(9, size // 2 + 1)))
        ox = int(rng.integers(0, size - span + 1))
        oy = int(rng.integers(0, size - span + 1))
        pts = rng.uniform(0, span, size=(3, 2)) + (ox, oy)
        # half-plane sign test against all three edges
        inside = np.ones((size, size), dtype=bool)
        signs = []
        for i in range(3):
            x1, y1 = pts[i]
            x2, y2 = pts[(i + 1) % 3]
            signs.append((xs - x1) * (y2 - y1) - (ys - y1) * (x2 - x1))
        pos = (signs[0] >= 0) & (signs[1] >= 0) & (signs[2] >= 0)
        neg = (signs[0] <= 0) & (signs[1] <= 0) & (signs[2] <= 0)
        inside = pos | neg
        if inside.sum() >= MIN_SHAPE_AREA:
            mask[inside] = True
            return
    # last resort keeps areas lawful without an unbounded loop
    mask[oy : oy + 4, ox : ox + 4] = True


_PAINTERS = (_draw_rectangle, _draw_disk, _draw_triangle)


def make_sample(rng: np.random.Generator, size: int) -> SyntheticSample:
    if size < 8:
        raise ContractError("synthetic images need at least 8px per side")
    background = rng.uniform(0.25, 0.75, size=3)
    rgb = np.tile(background, (size, size, 1))
    labels = np.zeros((size, size), dtype=np.int64)
    taken = [background]
    for _ in range(int(rng.integers(1, 4))):
        cls = int(rng.integers(0, N_SHAPE_CLASSES))
        color = _pick_color(rng, taken)
        taken.append(color)
        mask = np.zeros((size, size), dtype=bool)
        _PAINTERS[cls](rng, size, mask)
        rgb[mask] = color
        labels[mask] = cls + 1
    rgb = rgb + rng.normal(0.0, NOISE_SIGMA, size=rgb.shape)
    return SyntheticSample(Image(rgb), labels)


def gen_dataset(seed: int, n_samples: int, size: int = 64) -> list[SyntheticSample]:
    """Deterministic dataset: sample i depends only on (seed, i)."""
    samples = []
    for i in range(n_samples):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0, i)))
        samples.append(make_sample(rng, size))
    return samples


def majority_labels(pixel_labels: np.ndarray, region_pixels: list[np.ndarray]) -> np.ndarray:
    """Per-region majority pixel class, ties to the lower class id."""
    flat = pixel_labels.reshape(-1)
    out = np.empty(len(region_pixels), dtype=np.int64)
    for r, pix in enumerate(region_pixels):
        out[r] = int(np.argmax(np.bincount(flat[pix], minlength=N_SHAPE_CLASSES + 1)))
    return out
