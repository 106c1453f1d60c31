"""Synthetic hyperspectral scenes for desk-scale experiments.

Each cube mixes smooth Gaussian blobs (with smooth per-band spectral
envelopes) and a few piecewise-constant rectangles, then rescales into
[0, span] with span >= 0.7, so generated data always covers more than half
of the [0, 1] range.
"""

from __future__ import annotations

import numpy as np


def _spectral_envelope(c: int, rng: np.random.Generator) -> np.ndarray:
    center = rng.uniform(0, c - 1) if c > 1 else 0.0
    width = rng.uniform(0.6, max(1.0, c / 2.5))
    bands = np.arange(c)
    return np.exp(-((bands - center) ** 2) / (2.0 * width * width))


def synth_cube(h: int, w: int, c: int, rng: np.random.Generator) -> np.ndarray:
    """One (C, H, W) scene with values in [0, 1]."""
    yy, xx = np.mgrid[0:h, 0:w]
    yy = (yy + 0.5) / h
    xx = (xx + 0.5) / w
    cube = np.zeros((c, h, w))

    for _ in range(int(rng.integers(3, 6))):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        sy, sx = rng.uniform(0.08, 0.3, size=2)
        blob = np.exp(-((yy - cy) ** 2 / (2 * sy * sy) + (xx - cx) ** 2 / (2 * sx * sx)))
        cube += rng.uniform(0.4, 1.0) * _spectral_envelope(c, rng)[:, None, None] * blob[None]

    for _ in range(int(rng.integers(1, 4))):
        y0 = rng.uniform(0.0, 0.6)
        x0 = rng.uniform(0.0, 0.6)
        y1 = y0 + rng.uniform(0.2, 0.4)
        x1 = x0 + rng.uniform(0.2, 0.4)
        region = ((yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)).astype(np.float64)
        cube += rng.uniform(0.3, 0.9) * _spectral_envelope(c, rng)[:, None, None] * region[None]

    cube -= cube.min()
    peak = cube.max()
    if peak > 0:
        cube /= peak
    return cube * rng.uniform(0.7, 0.95)


def make_dataset(count: int, h: int, w: int, c: int, seed: int = 0) -> list[np.ndarray]:
    """Deterministic list of synthetic cubes."""
    rng = np.random.default_rng(seed)
    return [synth_cube(h, w, c, rng) for _ in range(count)]
