"""Image normalization: monochrome conversion, square crops, heat maps, max-shrink.

Images are plain numpy arrays indexed ``[row, col]``. Grayscale images are
``uint8`` of shape ``(height, width)``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

LUMA = (0.299, 0.587, 0.114)
PATCH_SIDE = 31


class ImageError(ValueError):
    pass


def round_half_away(x):
    """Round to nearest integer, ties away from zero (numpy rounds half-to-even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def as_gray(img) -> np.ndarray:
    """Validate a grayscale image and return it as a uint8 array."""
    a = np.asarray(img)
    if a.ndim != 2:
        raise ImageError(f"grayscale image must be 2-D, got shape {a.shape}")
    if a.size == 0:
        raise ImageError("image has zero size")
    if a.dtype != np.uint8:
        if np.any(a < 0) or np.any(a > 255):
            raise ImageError("intensities must lie in [0, 255]")
        if not np.all(a == np.floor(a)):
            raise ImageError("intensities must be integers")
        a = a.astype(np.uint8)
    return a


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int
    label: str = ""


def to_grayscale(image) -> np.ndarray:
    """Convert an ``(H, W)`` or ``(H, W, C)`` image to 8-bit luma.

    Single-channel input passes through unchanged. An alpha channel, if
    present as a 4th channel, is ignored.
    """
    a = np.asarray(image)
    if a.size == 0:
        raise ImageError("image has zero size")
    if a.ndim == 2:
        return as_gray(a)
    if a.ndim != 3:
        raise ImageError(f"unsupported image shape {a.shape}")
    if a.shape[2] == 1:
        return as_gray(a[:, :, 0])
    if a.shape[2] not in (3, 4):
        raise ImageError(f"unsupported channel count {a.shape[2]}")
    rgb = a[:, :, :3].astype(np.float64)
    y = LUMA[0] * rgb[:, :, 0] + LUMA[1] * rgb[:, :, 1] + LUMA[2] * rgb[:, :, 2]
    return np.clip(round_half_away(y), 0, 255).astype(np.uint8)


def raw_heat_map(img) -> np.ndarray:
    """Unscaled gradient magnitude: sqrt of the four squared neighbor differences.

    Out-of-bounds neighbors count as equal to the center pixel.
    """
    p = as_gray(img).astype(np.float64)
    if p.shape[0] < 3 or p.shape[1] < 3:
        raise ImageError(f"heat map needs at least 3x3 pixels, got {p.shape}")
    padded = np.pad(p, 1, mode="edge")
    center = padded[1:-1, 1:-1]
    total = np.zeros_like(p)
    for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb = padded[1 + di:padded.shape[0] - 1 + di, 1 + dj:padded.shape[1] - 1 + dj]
        total += (nb - center) ** 2
    # edge padding makes a border pixel its own outward neighbor: zero term
    return np.sqrt(total)


def rescale_255(raw: np.ndarray) -> np.ndarray:
    """Linearly map ``raw`` so its maximum becomes 255; all-zero stays zero."""
    raw = np.asarray(raw, dtype=np.float64)
    peak = raw.max()
    if peak <= 0:
        return np.zeros(raw.shape, dtype=np.uint8)
    return np.clip(round_half_away(raw * (255.0 / peak)), 0, 255).astype(np.uint8)


def heat_map(img) -> np.ndarray:
    return rescale_255(raw_heat_map(img))


def crop_square(img, box: BoundingBox) -> np.ndarray:
    """Smallest axis-aligned square containing ``box``, shifted to stay in bounds.

    The square is centered on the box center and never padded. If the image
    is too small to hold a square of side ``max(w, h)`` the side shrinks to
    the shorter image dimension.
    """
    a = as_gray(img)
    H, W = a.shape
    x0, y0 = max(box.x, 0), max(box.y, 0)
    x1, y1 = min(box.x + box.w, W), min(box.y + box.h, H)
    if box.w <= 0 or box.h <= 0 or x1 <= x0 or y1 <= y0:
        raise ImageError(f"box {box} does not intersect image of size {W}x{H}")
    side = min(max(box.w, box.h), W, H)
    left = box.x + (box.w - side) // 2
    top = box.y + (box.h - side) // 2
    left = min(max(left, 0), W - side)
    top = min(max(top, 0), H - side)
    return a[top:top + side, left:left + side].copy()


def _shrink_axis(a: np.ndarray, side: int, axis: int) -> np.ndarray:
    n = a.shape[axis]
    if n < side:
        return np.take(a, (np.arange(side) * n) // side, axis=axis)
    groups = (np.arange(n) * side) // n
    # groups are contiguous and non-decreasing, so reduceat over block starts works
    starts = np.flatnonzero(np.r_[True, groups[1:] != groups[:-1]])
    return np.maximum.reduceat(a, starts, axis=axis)


def shrink_max(img, side: int = PATCH_SIDE) -> np.ndarray:
    """Shrink to ``side x side`` keeping the brightest source pixel per output pixel.

    Source pixel ``(y, x)`` projects onto ``(floor(y*side/H), floor(x*side/W))``.
    An axis shorter than ``side`` is upsampled by nearest neighbor instead,
    since some output pixels would otherwise receive no source pixel.
    """
    a = as_gray(img)
    if side < 1:
        raise ImageError("side must be >= 1")
    return _shrink_axis(_shrink_axis(a, side, 0), side, 1)


def make_patch(image, box: BoundingBox, side: int = PATCH_SIDE) -> np.ndarray:
    """Full chain for one object: monochrome -> square crop -> heat map -> shrink."""
    gray = to_grayscale(image)
    sq = crop_square(gray, box)
    if min(sq.shape) < 3:
        raise ImageError(f"crop {sq.shape} too small for a heat map")
    return shrink_max(heat_map(sq), side)


# -- file formats ------------------------------------------------------------

def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "RGBA"):
            im = im.convert("RGB")
        return np.asarray(im)


def save_gray(path, img) -> None:
    Image.fromarray(as_gray(img), mode="L").save(path, format="PNG")


def read_box_manifest(path) -> tuple[list[tuple[str, BoundingBox]], int]:
    """Parse a ``path,x,y,w,h,label`` CSV. Returns (rows, skipped_count)."""
    rows: list[tuple[str, BoundingBox]] = []
    skipped = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"path", "x", "y", "w", "h", "label"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: manifest missing columns {sorted(missing)}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                box = BoundingBox(int(rec["x"]), int(rec["y"]), int(rec["w"]), int(rec["h"]), rec["label"])
                rows.append((rec["path"], box))
            except (TypeError, ValueError):
                log.warning("%s:%d: malformed row skipped", path, lineno)
                skipped += 1
    return rows, skipped


def write_patch_manifest(path, entries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"])
        for p, label in entries:
            w.writerow([p, label])


def read_patch_manifest(path) -> list[tuple[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "label"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected header path,label")
        return [(r["path"], r["label"]) for r in reader]


def load_patches(manifest_path) -> tuple[np.ndarray, list[str]]:
    """Load every patch listed in a patch manifest as a ``(N, side, side)`` array."""
    base = Path(manifest_path).parent
    entries = read_patch_manifest(manifest_path)
    imgs = [as_gray(load_image(base / p)) for p, _ in entries]
    labels = [lab for _, lab in entries]
    if not imgs:
        return np.zeros((0, PATCH_SIDE, PATCH_SIDE), dtype=np.uint8), labels
    return np.stack(imgs), labels
