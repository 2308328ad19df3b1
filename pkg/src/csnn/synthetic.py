"""Synthetic labelled corpora: horizontal bars, vertical bars and blobs."""
from __future__ import annotations

import numpy as np

from .preprocess import PATCH_SIDE, BoundingBox, heat_map, save_gray

CLASSES = ("hbars", "vbars", "blobs")


def _bars(rng: np.random.Generator, side: int, img: np.ndarray) -> None:
    for _ in range(rng.integers(1, 3)):
        thick = int(rng.integers(2, 4))
        r0 = int(rng.integers(0, side - thick + 1))
        img[r0:r0 + thick, :] += rng.uniform(80, 180)


def _blobs(rng: np.random.Generator, side: int, img: np.ndarray) -> None:
    yy, xx = np.mgrid[0:side, 0:side]
    for _ in range(rng.integers(3, 6)):
        rad = rng.uniform(2.5, 5.0)
        cy, cx = rng.uniform(rad, side - rad, size=2)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad] += rng.uniform(80, 180)


def raw_image(rng: np.random.Generator, label: int, side: int = PATCH_SIDE) -> np.ndarray:
    """One raw grayscale image of class ``label`` (0, 1 or 2)."""
    img = np.full((side, side), rng.uniform(20, 60))
    if label == 0:
        _bars(rng, side, img)
    elif label == 1:
        _bars(rng, side, img)
        img = img.T.copy()
    elif label == 2:
        _blobs(rng, side, img)
    else:
        raise ValueError(f"label must be 0, 1 or 2, got {label}")
    img += rng.normal(0.0, 4.0, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def patch_corpus(n: int, seed: int = 0, side: int = PATCH_SIDE) -> tuple[np.ndarray, np.ndarray]:
    """``n`` heat-map patches with labels cycling through the three classes."""
    rng = np.random.default_rng([seed, 0x5EED])
    labels = np.arange(n) % len(CLASSES)
    rng.shuffle(labels)
    patches = np.stack([heat_map(raw_image(rng, int(y), side)) for y in labels]) if n else \
        np.zeros((0, side, side), dtype=np.uint8)
    return patches, labels


def write_raw_dataset(root, n: int, seed: int = 0) -> None:
    """Write ``n`` raw scene images plus a ``boxes.csv`` manifest under ``root``.

    Each scene is a 64x48 canvas holding one object of random size.
    """
    from pathlib import Path

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, 0xDA7A])
    rows = ["path,x,y,w,h,label"]
    for i in range(n):
        label = i % len(CLASSES)
        side = int(rng.integers(28, 45))
        obj = raw_image(rng, label, side)
        canvas = np.clip(rng.normal(40, 4, size=(48, 64)), 0, 255).astype(np.uint8)
        y = int(rng.integers(0, 48 - side + 1))
        x = int(rng.integers(0, 64 - side + 1))
        canvas[y:y + side, x:x + side] = obj
        name = f"images/scene_{i:05d}.png"
        save_gray(root / name, canvas)
        box = BoundingBox(x, y, side, side, CLASSES[label])
        rows.append(f"{name},{box.x},{box.y},{box.w},{box.h},{box.label}")
    (root / "boxes.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
