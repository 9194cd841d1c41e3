"""Seeded multi-class geometric shapes on 2-D grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BACKGROUND = 0


def class_color(class_id: int) -> np.ndarray:
    # fixed per class, independent of the scene seed
    rng = np.random.Generator(np.random.Philox(key=0x5EED0000 + int(class_id)))
    return rng.uniform(0.0, 1.0, 3)


@dataclass
class ShapeScene:
    image: np.ndarray  # (H, W, 3) float32
    classes: np.ndarray  # (H, W) int, BACKGROUND where no shape


def make_scene(rng: np.random.Generator, res=(32, 32), classes=(1, 2), n_shapes: int = 3, noise: float = 0.05) -> ShapeScene:
    """Draw ``n_shapes`` discs/rectangles with class ids from ``classes``."""
    h, w = res
    yy, xx = np.mgrid[0:h, 0:w]
    labels = np.full((h, w), BACKGROUND, dtype=np.int64)
    for _ in range(n_shapes):
        cls = int(classes[rng.integers(len(classes))])
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        size = rng.uniform(0.15, 0.35) * min(h, w)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= size**2
        else:
            mask = (np.abs(yy - cy) <= size) & (np.abs(xx - cx) <= 0.6 * size)
        labels[mask] = cls
    image = np.empty((h, w, 3))
    image[:] = class_color(BACKGROUND)
    for cls in np.unique(labels):
        image[labels == cls] = class_color(cls)
    image += noise * rng.standard_normal(image.shape)
    return ShapeScene(image.astype(np.float32), labels)


def make_dataset(seed: int, count: int, res=(32, 32), classes=(1, 2), n_shapes: int = 3) -> list:
    rng = np.random.default_rng(seed)
    return [make_scene(rng, res, classes, n_shapes) for _ in range(count)]
