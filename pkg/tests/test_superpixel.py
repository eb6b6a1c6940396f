from collections import deque

import numpy as np
import pytest

from hyperseg.errors import ShapeMismatchError
from hyperseg.superpixel import (SuperpixelMap, UNLABELED, builtin_feature_extract,
                                 enforce_connectivity, pool_features, slic_segment,
                                 weak_labels_to_nodes)


def flood_fill_components(labels):
    """Independent 4-connectivity oracle: number of components per label."""
    h, w = labels.shape
    seen = np.zeros((h, w), dtype=bool)
    comps = {}
    for sy in range(h):
        for sx in range(w):
            if seen[sy, sx]:
                continue
            lbl = labels[sy, sx]
            comps[lbl] = comps.get(lbl, 0) + 1
            q = deque([(sy, sx)])
            seen[sy, sx] = True
            while q:
                y, x = q.popleft()
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and not seen[ny, nx] \
                            and labels[ny, nx] == lbl:
                        seen[ny, nx] = True
                        q.append((ny, nx))
    return comps


def two_tone_image(size=64):
    img = np.zeros((size, size, 3), np.uint8)
    img[:, :size // 2] = [200, 40, 40]
    img[:, size // 2:] = [40, 40, 200]
    return img


class TestSlic:
    def test_single_pixel_single_superpixel(self):
        sp = slic_segment(np.full((1, 1, 3), 77, np.uint8), 1)
        assert sp.node_count == 1
        assert sp.labels[0, 0] == 0

    def test_uniform_image_four_even_superpixels(self):
        sp = slic_segment(np.full((64, 64, 3), 128, np.uint8), 4)
        assert sp.node_count == 4
        sizes = np.bincount(sp.labels.ravel())
        assert np.all(sizes >= 1024 * 0.75) and np.all(sizes <= 1024 * 1.25)

    def test_two_tone_split_is_pure(self):
        sp = slic_segment(two_tone_image(), 2)
        assert sp.node_count == 2
        for node in range(2):
            cols = np.nonzero(sp.labels == node)[1]
            assert (cols < 32).all() or (cols >= 32).all()

    def test_too_many_superpixels_rejected(self):
        with pytest.raises(ValueError):
            slic_segment(np.zeros((4, 4, 3), np.uint8), 17)

    def test_partition_invariants(self, rng):
        for _ in range(5):
            img = rng.integers(0, 256, (48, 40, 3)).astype(np.uint8)
            xi = int(rng.integers(4, 40))
            sp = slic_segment(img, xi)
            hist = np.bincount(sp.labels.ravel(), minlength=sp.node_count)
            assert hist.sum() == 48 * 40
            assert (hist > 0).all()
            assert xi / 2 <= sp.node_count <= 2 * xi
            comps = flood_fill_components(sp.labels)
            assert all(c == 1 for c in comps.values())

    def test_deterministic(self, rng):
        img = rng.integers(0, 256, (32, 32, 3)).astype(np.uint8)
        a = slic_segment(img, 9, compactness=10.0, iters=10)
        b = slic_segment(img, 9, compactness=10.0, iters=10)
        assert np.array_equal(a.labels, b.labels)


class TestEnforceConnectivity:
    def test_already_connected_unchanged_up_to_relabeling(self):
        labels = np.zeros((8, 8), dtype=np.int64)
        labels[:, 4:] = 1
        out = enforce_connectivity(labels, 2)
        assert out.node_count == 2
        assert np.array_equal(out.labels, labels)

    def test_orphan_pixel_absorbed(self):
        labels = np.zeros((8, 8), dtype=np.int64)
        labels[:, 4:] = 1
        labels[4, 1] = 1  # a stray pixel of label 1 inside region 0
        out = enforce_connectivity(labels, 2)
        assert out.node_count == 2
        assert out.labels[4, 1] == out.labels[4, 0]

    def test_checkerboard_becomes_connected(self):
        ys, xs = np.indices((16, 16))
        labels = ((ys + xs) % 2).astype(np.int64)
        out = enforce_connectivity(labels, 2)
        comps = flood_fill_components(out.labels)
        assert all(c == 1 for c in comps.values())

    def test_large_fragment_survives_as_new_superpixel(self):
        labels = np.zeros((8, 8), dtype=np.int64)
        labels[:, :3] = 1
        labels[:, 5:] = 1  # two big fragments of label 1, disconnected
        out = enforce_connectivity(labels, 3)
        assert out.node_count == 3
        comps = flood_fill_components(out.labels)
        assert all(c == 1 for c in comps.values())


class TestPoolFeatures:
    def test_constant_featmap(self):
        sp = slic_segment(two_tone_image(16), 2)
        feats = pool_features(np.full((3, 8, 8), 2.5), sp)
        assert np.array_equal(feats, np.full((sp.node_count, 3), 2.5))

    def test_identity_pooling(self, rng):
        h = w = 4
        labels = np.arange(h * w).reshape(h, w)
        sp = SuperpixelMap(labels, h * w)
        fm = rng.random((2, h, w))
        feats = pool_features(fm, sp)
        assert np.array_equal(feats, fm.reshape(2, -1).T)

    def test_two_column_average(self):
        sp = SuperpixelMap(np.array([[0, 1], [0, 1]], dtype=np.int64), 2)
        fm = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        feats = pool_features(fm, sp)
        assert np.array_equal(feats, [[2.0], [3.0]])

    def test_matches_bruteforce_at_full_resolution(self, rng):
        img = rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)
        sp = slic_segment(img, 6)
        fm = rng.random((4, 16, 16))
        feats = pool_features(fm, sp)
        for node in range(sp.node_count):
            mask = sp.labels == node
            expected = fm[:, mask].mean(axis=1)
            assert np.abs(feats[node] - expected).max() < 1e-9

    def test_vanishing_node_takes_nearest_cell(self):
        # node 1 is a single pixel that disappears at 2x downsampling
        labels = np.zeros((4, 4), dtype=np.int64)
        labels[0, 0] = 1
        sp = SuperpixelMap(labels, 2)
        fm = np.arange(4, dtype=np.float64).reshape(1, 2, 2)
        feats = pool_features(fm, sp)
        assert feats[1, 0] == fm[0, 0, 0]

    def test_empty_feature_map_rejected(self):
        sp = SuperpixelMap(np.zeros((2, 2), dtype=np.int64), 1)
        with pytest.raises(ShapeMismatchError):
            pool_features(np.zeros((0, 2, 2)), sp)


class TestWeakLabels:
    def test_no_annotation_all_unlabeled(self):
        sp = SuperpixelMap(np.zeros((3, 3), dtype=np.int64), 1)
        ann = np.full((3, 3), UNLABELED, dtype=np.int64)
        assert np.array_equal(weak_labels_to_nodes(ann, sp), [UNLABELED])

    def test_majority_vote(self):
        sp = SuperpixelMap(np.zeros((1, 3), dtype=np.int64), 1)
        ann = np.array([[1, 1, 2]], dtype=np.int64)
        assert weak_labels_to_nodes(ann, sp)[0] == 1

    def test_tie_breaks_to_lowest_class(self):
        sp = SuperpixelMap(np.zeros((1, 4), dtype=np.int64), 1)
        ann = np.array([[2, 2, 5, 5]], dtype=np.int64)
        assert weak_labels_to_nodes(ann, sp)[0] == 2

    def test_pixel_order_invariance(self, rng):
        labels = rng.integers(0, 4, (8, 8)).astype(np.int64)
        sp = SuperpixelMap(labels, 4)
        ann = np.where(rng.random((8, 8)) < 0.4, rng.integers(0, 3, (8, 8)), UNLABELED)
        base = weak_labels_to_nodes(ann, sp)
        # relabel pixels in transposed order: same multiset per node
        assert np.array_equal(weak_labels_to_nodes(ann.T.copy(), SuperpixelMap(
            labels.T.copy(), 4)), base)

    def test_shape_mismatch(self):
        sp = SuperpixelMap(np.zeros((2, 2), dtype=np.int64), 1)
        with pytest.raises(ShapeMismatchError):
            weak_labels_to_nodes(np.zeros((3, 3), dtype=np.int64), sp)


class TestBuiltinFeatures:
    def test_uniform_gray(self):
        fm = builtin_feature_extract(np.full((16, 16, 3), 128, np.uint8), cell=2)
        assert fm.shape == (16, 8, 8)
        assert np.abs(fm[:3] - 128 / 255).max() < 1e-12
        assert np.array_equal(fm[6], np.ones((8, 8)))   # all hue mass in bin 0
        assert np.array_equal(fm[7:14], np.zeros((7, 8, 8)))

    def test_cell_one_keeps_resolution(self):
        fm = builtin_feature_extract(np.zeros((5, 7, 3), np.uint8), cell=1)
        assert fm.shape == (16, 5, 7)

    def test_red_blue_halves_separate_after_pooling(self):
        from hyperseg.superpixel import pool_features, slic_segment
        img = np.zeros((32, 32, 3), np.uint8)
        img[:, :16] = [220, 30, 30]
        img[:, 16:] = [30, 30, 220]
        sp = slic_segment(img, 2)
        feats = pool_features(builtin_feature_extract(img, cell=2), sp)
        d = np.linalg.norm(feats[0, :3] - feats[1, :3])
        assert d > 0.5

    def test_position_channels_normalized(self):
        fm = builtin_feature_extract(np.zeros((8, 8, 3), np.uint8), cell=2)
        assert fm[14].min() > 0 and fm[14].max() < 1
        assert np.all(np.diff(fm[14], axis=1) > 0)   # x grows along columns
        assert np.all(np.diff(fm[15], axis=0) > 0)   # y grows along rows
