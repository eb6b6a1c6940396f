"""Superpixel segmentation and projection of pixel-level data onto nodes.

Segmentation is localized k-means over CIELAB + position (SLIC) with
grid-seeded centers, followed by a connectivity pass that merges small
disconnected fragments into their largest neighbor. Pixel-level feature maps
and weak annotations are reduced onto superpixel nodes by average pooling
and majority vote respectively.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .color import rgb_to_hue, rgb_to_lab
from .errors import ShapeMismatchError

UNLABELED = -1


@dataclass
class SuperpixelMap:
    """Dense per-pixel superpixel assignment; labels cover [0, node_count)."""

    labels: np.ndarray  # (H, W) int64
    node_count: int

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def centroids(self) -> np.ndarray:
        """(node_count, 2) array of mean (row, col) per superpixel."""
        flat = self.labels.ravel()
        counts = np.bincount(flat, minlength=self.node_count).astype(np.float64)
        ys, xs = np.indices(self.labels.shape)
        cy = np.bincount(flat, weights=ys.ravel(), minlength=self.node_count) / counts
        cx = np.bincount(flat, weights=xs.ravel(), minlength=self.node_count) / counts
        return np.stack([cy, cx], axis=1)


def _seed_grid(height: int, width: int, n_superpixels: int) -> tuple[int, int]:
    ny = max(1, min(height, round(math.sqrt(n_superpixels * height / width))))
    nx = max(1, min(width, round(n_superpixels / ny)))
    return ny, nx


def slic_segment(image: np.ndarray, n_superpixels: int, compactness: float = 10.0,
                 iters: int = 10) -> SuperpixelMap:
    """Segment an 8-bit RGB image into roughly n_superpixels regions.

    Localized k-means in (L, a, b, y, x) with distance
    d = d_lab + (compactness / grid_spacing) * d_xy, searched in a window of
    twice the grid spacing around each center. Deterministic for fixed
    arguments.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.size == 0:
        raise ShapeMismatchError("expected a non-empty H x W x 3 image")
    h, w = image.shape[:2]
    if n_superpixels < 1:
        raise ValueError("n_superpixels must be >= 1")
    if n_superpixels > h * w:
        raise ValueError(f"requested {n_superpixels} superpixels for {h * w} pixels")

    lab = rgb_to_lab(image.astype(np.float64) / 255.0)
    spacing = math.sqrt(h * w / n_superpixels)
    ny, nx = _seed_grid(h, w, n_superpixels)
    cy = (np.arange(ny) + 0.5) * h / ny
    cx = (np.arange(nx) + 0.5) * w / nx
    centers_yx = np.stack(np.meshgrid(cy, cx, indexing="ij"), axis=-1).reshape(-1, 2)
    seed_rows = np.clip(centers_yx[:, 0].astype(np.int64), 0, h - 1)
    seed_cols = np.clip(centers_yx[:, 1].astype(np.int64), 0, w - 1)
    centers_lab = lab[seed_rows, seed_cols]

    half_y = int(math.ceil(max(spacing, h / ny)))
    half_x = int(math.ceil(max(spacing, w / nx)))
    spatial_scale = compactness / spacing

    labels = np.zeros((h, w), dtype=np.int64)
    for _ in range(max(1, iters)):
        best = np.full((h, w), np.inf)
        labels = np.full((h, w), -1, dtype=np.int64)
        for k in range(centers_yx.shape[0]):
            ky, kx = centers_yx[k]
            r0, r1 = max(0, int(ky) - half_y), min(h, int(ky) + half_y + 1)
            c0, c1 = max(0, int(kx) - half_x), min(w, int(kx) + half_x + 1)
            win = lab[r0:r1, c0:c1]
            d_lab = np.sqrt(((win - centers_lab[k]) ** 2).sum(axis=-1))
            yy = np.arange(r0, r1, dtype=np.float64)[:, None] - ky
            xx = np.arange(c0, c1, dtype=np.float64)[None, :] - kx
            d_xy = np.sqrt(yy * yy + xx * xx)
            d = d_lab + spatial_scale * d_xy
            closer = d < best[r0:r1, c0:c1]
            labels[r0:r1, c0:c1][closer] = k
            best[r0:r1, c0:c1][closer] = d[closer]
        missed = labels < 0
        if missed.any():
            ys, xs = np.nonzero(missed)
            d_lab = np.sqrt(((lab[ys, xs][:, None, :] - centers_lab[None]) ** 2).sum(-1))
            d_xy = np.sqrt((ys[:, None] - centers_yx[None, :, 0]) ** 2
                           + (xs[:, None] - centers_yx[None, :, 1]) ** 2)
            labels[ys, xs] = np.argmin(d_lab + spatial_scale * d_xy, axis=1)

        flat = labels.ravel()
        counts = np.bincount(flat, minlength=centers_yx.shape[0]).astype(np.float64)
        filled = counts > 0
        ys, xs = np.indices((h, w))
        sum_y = np.bincount(flat, weights=ys.ravel(), minlength=centers_yx.shape[0])
        sum_x = np.bincount(flat, weights=xs.ravel(), minlength=centers_yx.shape[0])
        centers_yx[filled, 0] = sum_y[filled] / counts[filled]
        centers_yx[filled, 1] = sum_x[filled] / counts[filled]
        for c in range(3):
            s = np.bincount(flat, weights=lab[..., c].ravel(),
                            minlength=centers_yx.shape[0])
            centers_lab[filled, c] = s[filled] / counts[filled]

    return enforce_connectivity(labels, n_superpixels)


def enforce_connectivity(labels: np.ndarray, n_superpixels: int) -> SuperpixelMap:
    """Split disconnected regions and absorb fragments below the size floor.

    Every 4-connected component becomes a candidate superpixel; components
    smaller than (H*W / n_superpixels) / 4 are merged (smallest first) into
    their currently largest adjacent component. Final labels are compacted
    in raster order of first occurrence.
    """
    labels = np.asarray(labels, dtype=np.int64)
    h, w = labels.shape
    min_size = (h * w / n_superpixels) / 4.0

    comp = np.full((h, w), -1, dtype=np.int64)
    n_comp = 0
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    slices = ndimage.find_objects(labels + 1)
    for lbl, sl in enumerate(slices):
        if sl is None:
            continue
        mask = labels[sl] == lbl
        cc, n = ndimage.label(mask, structure=structure)
        comp[sl][mask] = cc[mask] + n_comp - 1
        n_comp += n

    sizes = np.bincount(comp.ravel(), minlength=n_comp).astype(np.int64)
    pairs = set()
    a, b = comp[:, :-1].ravel(), comp[:, 1:].ravel()
    diff = a != b
    pairs.update(map(tuple, np.sort(np.stack([a[diff], b[diff]], 1), axis=1).tolist()))
    a, b = comp[:-1, :].ravel(), comp[1:, :].ravel()
    diff = a != b
    pairs.update(map(tuple, np.sort(np.stack([a[diff], b[diff]], 1), axis=1).tolist()))
    adj: list[set[int]] = [set() for _ in range(n_comp)]
    for x, y in pairs:
        adj[x].add(y)
        adj[y].add(x)

    parent = np.arange(n_comp, dtype=np.int64)

    def find(c: int) -> int:
        while parent[c] != c:
            parent[c] = parent[parent[c]]
            c = parent[c]
        return int(c)

    heap = [(int(sizes[c]), c) for c in range(n_comp)]
    heapq.heapify(heap)
    while heap:
        s, c = heapq.heappop(heap)
        if find(c) != c or sizes[c] != s:
            continue
        if s >= min_size:
            break
        roots = {find(n) for n in adj[c]} - {c}
        if not roots:
            continue
        target = max(roots, key=lambda r: (sizes[r], -r))
        parent[c] = target
        sizes[target] += sizes[c]
        adj[target] |= adj[c]
        heapq.heappush(heap, (int(sizes[target]), target))

    root_of = np.array([find(c) for c in range(n_comp)], dtype=np.int64)
    flat = root_of[comp.ravel()]
    uniq, first = np.unique(flat, return_index=True)
    remap = np.empty(n_comp, dtype=np.int64)
    remap[uniq[np.argsort(first)]] = np.arange(uniq.size)
    out = remap[flat].reshape(h, w)
    return SuperpixelMap(out, int(uniq.size))


def pool_features(featmap: np.ndarray, spmap: SuperpixelMap) -> np.ndarray:
    """Average a (C, Hf, Wf) feature map over each superpixel region.

    The label map is resampled to the feature grid by nearest neighbor; a
    node whose region vanishes under resampling takes the feature of the
    cell nearest its centroid. Returns (node_count, C) float64.
    """
    featmap = np.asarray(featmap, dtype=np.float64)
    if featmap.ndim != 3 or featmap.shape[0] < 1 or featmap.shape[1] < 1 or featmap.shape[2] < 1:
        raise ShapeMismatchError("expected a non-empty C x Hf x Wf feature map")
    c, hf, wf = featmap.shape
    h, w = spmap.labels.shape
    if hf > h or wf > w:
        raise ShapeMismatchError("feature map must not exceed the image grid")

    src_rows = np.clip(((np.arange(hf) + 0.5) * h / hf).astype(np.int64), 0, h - 1)
    src_cols = np.clip(((np.arange(wf) + 0.5) * w / wf).astype(np.int64), 0, w - 1)
    small = spmap.labels[src_rows[:, None], src_cols[None, :]].ravel()

    counts = np.bincount(small, minlength=spmap.node_count).astype(np.float64)
    out = np.empty((spmap.node_count, c), dtype=np.float64)
    for ch in range(c):
        s = np.bincount(small, weights=featmap[ch].ravel(), minlength=spmap.node_count)
        out[:, ch] = np.divide(s, counts, out=np.zeros_like(s), where=counts > 0)

    empty = np.nonzero(counts == 0)[0]
    if empty.size:
        cent = spmap.centroids()[empty]
        fy = np.clip(np.rint(cent[:, 0] * hf / h - 0.5).astype(np.int64), 0, hf - 1)
        fx = np.clip(np.rint(cent[:, 1] * wf / w - 0.5).astype(np.int64), 0, wf - 1)
        out[empty] = featmap[:, fy, fx].T
    return out


def weak_labels_to_nodes(annotation: np.ndarray, spmap: SuperpixelMap) -> np.ndarray:
    """Majority class among a node's annotated pixels; ties pick the lowest
    class index, nodes without annotated pixels stay UNLABELED."""
    annotation = np.asarray(annotation, dtype=np.int64)
    if annotation.shape != spmap.labels.shape:
        raise ShapeMismatchError("annotation and superpixel map sizes differ")
    node_labels = np.full(spmap.node_count, UNLABELED, dtype=np.int64)
    marked = annotation >= 0
    if not marked.any():
        return node_labels
    n_cls = int(annotation[marked].max()) + 1
    joint = spmap.labels[marked] * n_cls + annotation[marked]
    counts = np.bincount(joint, minlength=spmap.node_count * n_cls)
    counts = counts.reshape(spmap.node_count, n_cls)
    has_any = counts.sum(axis=1) > 0
    node_labels[has_any] = counts[has_any].argmax(axis=1)
    return node_labels


def builtin_feature_extract(image: np.ndarray, cell: int = 2) -> np.ndarray:
    """Hand-crafted per-cell features: mean RGB (3), mean CIELAB (3), a 3x3
    neighborhood-averaged 8-bin hue histogram (8), and the normalized cell
    center position (2). Returns (16, H//cell, W//cell) float64."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatchError("expected an H x W x 3 image")
    if cell < 1:
        raise ValueError("cell must be >= 1")
    h, w = image.shape[:2]
    hf, wf = max(1, h // cell), max(1, w // cell)
    rgb = image.astype(np.float64) / 255.0

    ys, xs = np.indices((h, w))
    cy = np.minimum(ys // cell, hf - 1)
    cx = np.minimum(xs // cell, wf - 1)
    cidx = (cy * wf + cx).ravel()
    counts = np.bincount(cidx, minlength=hf * wf).astype(np.float64)

    def cell_mean(values: np.ndarray) -> np.ndarray:
        s = np.bincount(cidx, weights=values.ravel(), minlength=hf * wf)
        return (s / counts).reshape(hf, wf)

    lab = rgb_to_lab(rgb)
    channels = [cell_mean(rgb[..., 0]), cell_mean(rgb[..., 1]), cell_mean(rgb[..., 2]),
                cell_mean(lab[..., 0]) / 100.0,
                (cell_mean(lab[..., 1]) + 100.0) / 200.0,
                (cell_mean(lab[..., 2]) + 100.0) / 200.0]

    hue_bin = np.minimum((rgb_to_hue(rgb) * 8).astype(np.int64), 7)
    hist = np.bincount(cidx * 8 + hue_bin.ravel(), minlength=hf * wf * 8)
    hist = hist.reshape(hf * wf, 8) / counts[:, None]
    for b in range(8):
        channels.append(ndimage.uniform_filter(
            hist[:, b].reshape(hf, wf), size=3, mode="nearest"))

    xpos = np.broadcast_to((np.arange(wf) + 0.5)[None, :] * cell / w, (hf, wf))
    ypos = np.broadcast_to((np.arange(hf) + 0.5)[:, None] * cell / h, (hf, wf))
    channels.append(np.ascontiguousarray(xpos))
    channels.append(np.ascontiguousarray(ypos))
    return np.stack(channels, axis=0)
