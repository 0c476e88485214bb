"""Small natural-image corpus assembled from images bundled with scikit-image and scikit-learn.

Training tiles (128x128) and test crops (192x192) come from disjoint source
images.  Everything is written as 8-bit PGM so the CLI can read it directly.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

TRAIN_SOURCES = [
    "astronaut.png", "brick.png", "grass.png", "gravel.png", "moon.png", "chelsea.png",
    "rocket.jpg", "motorcycle_left.png", "coins.png", "cell.png", "ihc.png",
    "china.jpg", "flower.jpg",
]
TEST_SOURCES = ["camera.png", "coffee.png"]
TRAIN_TILE = 128
TEST_TILE = 192
N_TEST = 10


def _source_path(name):
    import skimage
    import sklearn

    for base in (Path(skimage.__file__).parent / "data", Path(sklearn.__file__).parent / "datasets" / "images"):
        if (base / name).exists():
            return base / name
    raise FileNotFoundError(name)


def _gray(name):
    from PIL import Image

    with Image.open(_source_path(name)) as im:
        return np.asarray(im.convert("L"), dtype=float) / 255.0


def _tiles(img, size):
    h, w = img.shape
    for r in range(0, h - size + 1, size):
        for c in range(0, w - size + 1, size):
            yield img[r : r + size, c : c + size]


def build(root) -> tuple[Path, Path]:
    """Create ``root/train`` and ``root/test`` if missing; returns both paths."""
    from gmdm.metrics_io import write_pgm

    root = Path(root)
    train, test = root / "train", root / "test"
    if train.is_dir() and test.is_dir() and len(os.listdir(test)) == N_TEST:
        return train, test
    train.mkdir(parents=True, exist_ok=True)
    test.mkdir(parents=True, exist_ok=True)
    for name in TRAIN_SOURCES:
        stem = name.rsplit(".", 1)[0]
        for i, tile in enumerate(_tiles(_gray(name), TRAIN_TILE)):
            write_pgm(train / f"{stem}_{i:02d}.pgm", tile)
    crops = [(name, t) for name in TEST_SOURCES for t in _tiles(_gray(name), TEST_TILE)]
    for i, (name, tile) in enumerate(crops[:N_TEST]):
        write_pgm(test / f"{name.rsplit('.', 1)[0]}_{i:02d}.pgm", tile)
    return train, test
