"""Desk-scale HR image sources cut from scikit-image's bundled photographs.

Test and training crops never share pixels: test crops come from a fixed
window of each photo, training crops from disjoint regions or other photos.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import skimage.data
from PIL import Image

from .image import write_png

DATA_DIR = Path(skimage.data.__file__).parent

# (name, bundled file, top, left); every crop is CROP x CROP
CROP = 128
TEST_SOURCES = (
    ("astronaut", "astronaut.png", 60, 180),
    ("chelsea", "chelsea.png", 60, 130),
    ("coffee", "coffee.png", 180, 220),
    ("rocket", "rocket.jpg", 150, 260),
    ("motorcycle", "motorcycle_left.png", 120, 300),
    ("hubble", "hubble_deep_field.jpg", 300, 300),
    ("ihc", "ihc.png", 200, 200),
    ("camera", "camera.png", 90, 200),
)
TRAIN_SOURCES = (
    ("astronaut_t", "astronaut.png", 340, 20),
    ("coffee_t", "coffee.png", 20, 420),
    ("rocket_t", "rocket.jpg", 260, 20),
    ("motorcycle_t", "motorcycle_left.png", 380, 680),
    ("hubble_t", "hubble_deep_field.jpg", 650, 700),
    ("retina_t", "retina.jpg", 600, 600),
    ("ihc_t", "ihc.png", 360, 20),
    ("brick_t", "brick.png", 100, 100),
    ("grass_t", "grass.png", 300, 300),
    ("gravel_t", "gravel.png", 50, 350),
    ("camera_t", "camera.png", 380, 360),
    ("coins_t", "coins.png", 100, 150),
    ("text_t", "text.png", 0, 20),
    ("page_t", "page.png", 20, 30),
    ("moon_t", "moon.png", 200, 200),
    ("chelsea_t", "chelsea.png", 160, 0),
)


def _load(filename: str, top: int, left: int, size: int = CROP) -> np.ndarray:
    with Image.open(DATA_DIR / filename) as im:
        img = np.asarray(im, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    img = img[:, :, :3] / 255.0
    h, w = img.shape[:2]
    top, left = min(top, h - size), min(left, w - size)
    return img[top : top + size, left : left + size]


def write_sources(out_dir, which: str = "test", count: int | None = None) -> list[Path]:
    """Write desk HR PNGs for the ``test`` or ``train`` set; return their paths."""
    sources = {"test": TEST_SOURCES, "train": TRAIN_SOURCES}[which]
    if count is not None:
        sources = sources[:count]
    out_dir = Path(out_dir)
    paths = []
    for name, filename, top, left in sources:
        path = out_dir / f"{name}.png"
        write_png(path, _load(filename, top, left))
        paths.append(path)
    return paths
