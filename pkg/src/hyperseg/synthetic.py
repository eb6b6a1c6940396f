"""Seeded synthetic shape datasets: images, dense labels, and scribbles.

Each image holds 1-3 axis-aligned shapes (rectangle, disk, or triangle) on a
textured background. Shape colors correlate with their class so that pooled
color features separate the classes. Scribbles are short random walks inside
a region, at least one per class present in the image.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataio import save_label_png, write_manifest
from PIL import Image

# base colors for background (class 0) and up to 20 shape classes
_CLASS_COLORS = np.array([
    [110, 110, 110],
    [200, 60, 50], [70, 170, 70], [60, 90, 200], [210, 190, 60],
    [170, 70, 190], [70, 190, 190], [230, 130, 40], [120, 70, 30],
    [230, 110, 170], [40, 130, 90], [140, 190, 40], [90, 40, 130],
    [190, 220, 200], [30, 60, 60], [240, 220, 180], [100, 140, 220],
    [180, 30, 90], [130, 160, 120], [250, 80, 90], [20, 30, 120],
], dtype=np.float64)


def _smooth_field(rng: np.random.Generator, size: int, amplitude: float,
                  grid: int = 5) -> np.ndarray:
    """Bilinearly upsampled coarse noise: a smooth color cast that survives
    average pooling, unlike per-pixel noise."""
    coarse = rng.uniform(-amplitude, amplitude, (grid, grid, 3))
    pos = np.linspace(0, grid - 1, size)
    i0 = np.clip(pos.astype(np.int64), 0, grid - 2)
    frac = pos - i0
    rows = (coarse[i0] * (1 - frac)[:, None, None]
            + coarse[i0 + 1] * frac[:, None, None])
    cols = (rows[:, i0] * (1 - frac)[None, :, None]
            + rows[:, i0 + 1] * frac[None, :, None])
    return cols


def _shape_mask(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of one randomly placed shape, fully inside the canvas."""
    half = rng.integers(size // 10, size // 5 + 1)
    cy = rng.integers(half + 1, size - half - 1)
    cx = rng.integers(half + 1, size - half - 1)
    ys, xs = np.indices((size, size))
    if kind == 0:  # rectangle
        hy = rng.integers(max(2, half // 2), half + 1)
        return (np.abs(ys - cy) <= hy) & (np.abs(xs - cx) <= half)
    if kind == 1:  # disk
        return (ys - cy) ** 2 + (xs - cx) ** 2 <= half ** 2
    # upright triangle: widens linearly toward the base row
    rel = (ys - (cy - half)) / (2.0 * half)
    return (rel >= 0) & (rel <= 1) & (np.abs(xs - cx) <= rel * half)


def _scribble_mask(region: np.ndarray, rng: np.random.Generator,
                   max_len: int = 30) -> np.ndarray:
    """Random 4-connected walk inside `region`; never leaves it."""
    out = np.zeros_like(region)
    ys, xs = np.nonzero(region)
    start = rng.integers(0, ys.size)
    y, x = int(ys[start]), int(xs[start])
    out[y, x] = True
    steps = min(max_len, max(3, ys.size // 4))
    h, w = region.shape
    for _ in range(steps):
        moves = [(y + dy, x + dx) for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1))
                 if 0 <= y + dy < h and 0 <= x + dx < w and region[y + dy, x + dx]]
        if not moves:
            break
        y, x = moves[rng.integers(0, len(moves))]
        out[y, x] = True
    return out


def gen_synthetic_dataset(n_images: int, size: int, n_classes: int, seed: int,
                          out_dir: str | Path, min_shapes: int = 1,
                          max_shapes: int = 3, color_cast: float = 35.0) -> Path:
    """Write images, dense ground truth, scribbles, and a manifest; returns
    the manifest path. Output bytes are a pure function of the arguments."""
    if n_classes < 2 or n_classes > 21:
        raise ValueError("n_classes must be in [2, 21]")
    if size < 32:
        raise ValueError("size must be >= 32")
    if not 1 <= min_shapes <= max_shapes:
        raise ValueError("need 1 <= min_shapes <= max_shapes")
    out_dir = Path(out_dir)
    for sub in ("images", "gt", "scribbles"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    images, gts, scribbles = [], [], []
    for i in range(n_images):
        gt = np.zeros((size, size), dtype=np.int64)
        img = np.empty((size, size, 3), dtype=np.float64)
        bg = _CLASS_COLORS[0] + rng.uniform(-25, 25, 3)
        img[:] = bg
        img += rng.uniform(-18, 18, (size, size, 1))  # luminance texture

        n_shapes = int(rng.integers(min_shapes, max_shapes + 1))
        for _ in range(n_shapes):
            cls = int(rng.integers(1, n_classes))
            mask = _shape_mask(int(rng.integers(0, 3)), size, rng)
            color = _CLASS_COLORS[cls] + rng.uniform(-12, 12, 3)
            img[mask] = color + rng.uniform(-10, 10, (int(mask.sum()), 3))
            gt[mask] = cls
        if color_cast > 0:
            img += _smooth_field(rng, size, color_cast)

        scr = np.full((size, size), 255, dtype=np.int64)
        for cls in np.unique(gt):
            walk = _scribble_mask(gt == cls, rng)
            scr[walk] = cls

        img_u8 = np.clip(img, 0, 255).astype(np.uint8)
        name = f"img_{i:04d}"
        Image.fromarray(img_u8, mode="RGB").save(out_dir / "images" / f"{name}.png")
        save_label_png(out_dir / "gt" / f"{name}.png", gt)
        save_label_png(out_dir / "scribbles" / f"{name}.png", scr)
        images.append(f"images/{name}.png")
        gts.append(f"gt/{name}.png")
        scribbles.append(f"scribbles/{name}.png")

    manifest = out_dir / "manifest.json"
    write_manifest(manifest, images, annotations=gts, weak=scribbles,
                   n_classes=21, ignore_index=255)
    return manifest
