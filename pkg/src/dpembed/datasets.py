"""Procedural style datasets.

Two families of 16x16 grayscale images stand in for private style datasets:

- "strokes": random smooth curves drawn with a soft brush on a dark
  background, a proxy for free-hand artwork.
- "glyphs": filled star-convex polygon silhouettes, dark on a light
  background, a proxy for high-contrast pictograms.

Every image is a pure function of (family, seed, index), so a dataset is
reproducible from its name and seed alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import ImageTensor
from .rng import stream

IMAGE_SIZE = 16

FAMILIES = ("strokes", "glyphs")

# family constants: background/foreground intensity and stroke geometry
_STROKE_BG = -0.85
_STROKE_FG = 0.9
_STROKE_WIDTH = 0.9
_GLYPH_BG = 0.9
_GLYPH_FG = -0.9


@dataclass(frozen=True)
class StyleDataset:
    name: str
    family: str
    images: tuple
    seed: int

    def __post_init__(self):
        if not self.images:
            raise ValueError("style dataset must be nonempty")

    def __len__(self) -> int:
        return len(self.images)


def _stroke_image(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    paint = np.zeros((size, size))
    for _ in range(int(rng.integers(2, 4))):
        # quadratic curve through three random control points
        pts = rng.uniform(1.0, size - 2.0, size=(3, 2))
        s = np.linspace(0.0, 1.0, 48)[:, None]
        curve = ((1 - s) ** 2) * pts[0] + 2 * s * (1 - s) * pts[1] + (s**2) * pts[2]
        for cy, cx in curve:
            d2 = (yy - cy) ** 2 + (xx - cx) ** 2
            paint += np.exp(-d2 / (2.0 * _STROKE_WIDTH**2))
    paint = np.minimum(paint, 1.0)
    return _STROKE_BG + (_STROKE_FG - _STROKE_BG) * paint


def _glyph_image(rng: np.random.Generator, size: int) -> np.ndarray:
    k = int(rng.integers(5, 9))
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=k))
    radii = rng.uniform(4.0, 7.5, size=k)
    cy, cx = (size - 1) / 2.0 + rng.uniform(-1.5, 1.5, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    theta = np.arctan2(yy - cy, xx - cx) % (2.0 * np.pi)
    r = np.hypot(yy - cy, xx - cx)
    # star-convex fill: inside iff the radius is below the boundary radius
    # interpolated (periodically) between adjacent vertices at this angle
    ext_angles = np.concatenate([angles, [angles[0] + 2.0 * np.pi]])
    ext_radii = np.concatenate([radii, [radii[0]]])
    boundary = np.interp(theta, ext_angles, ext_radii, period=2.0 * np.pi)
    inside = r <= boundary
    img = np.full((size, size), _GLYPH_BG)
    img[inside] = _GLYPH_FG
    return img


def make_style_dataset(
    family: str, n: int, seed: int, size: int = IMAGE_SIZE
) -> StyleDataset:
    """Generate n images of the given family, deterministically from seed."""
    if family not in FAMILIES:
        raise ValueError(f"unknown style family {family!r}; choose from {FAMILIES}")
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    draw = _stroke_image if family == "strokes" else _glyph_image
    images = []
    for i in range(n):
        rng = stream(seed, family, i)
        pixels = np.clip(draw(rng, size), -1.0, 1.0)
        images.append(ImageTensor(pixels=pixels.ravel(), height=size, width=size))
    return StyleDataset(
        name=f"{family}-{n}-{seed}", family=family, images=tuple(images), seed=seed
    )
