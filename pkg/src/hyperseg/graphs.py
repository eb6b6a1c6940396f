"""Affinity graph and hypergraph construction over superpixel nodes.

A dataset is split into partition graphs of bounded node count. Within each
partition, a block-diagonal spatial graph connects superpixels that share a
pixel boundary, and a k-NN graph connects embedding-space neighbors across
images. Both carry Gaussian edge weights. Hypergraphs combine the two, and
the normalized propagation operators feed the convolutional layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as _sp

from .errors import ShapeMismatchError
from .sparse import SparseMatrix
from .superpixel import SuperpixelMap


def round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


@dataclass
class PartitionPlan:
    n_images: int            # total images
    n_superpixels: int       # requested superpixels per image
    max_nodes: int           # node cap per partition graph
    n_graphs: int            # partition count
    images_per_graph: int    # images per partition (last takes the remainder)
    assignment: np.ndarray   # per-image partition index

    def image_ranges(self) -> list[tuple[int, int]]:
        """[start, stop) image index range of each partition."""
        out = []
        start = 0
        for g in range(self.n_graphs):
            stop = self.n_images if g == self.n_graphs - 1 else start + self.images_per_graph
            out.append((start, stop))
            start = stop
        return out


def plan_partition(n_images: int, n_superpixels: int, max_nodes: int) -> PartitionPlan:
    """Split the dataset into round(n_images * n_superpixels / max_nodes)
    partition graphs of round(n_images / n_graphs) images each; images are
    assigned contiguously and the last partition takes the remainder."""
    if n_images < 1 or n_superpixels < 1 or max_nodes < 1:
        raise ValueError("plan_partition arguments must be >= 1")
    n_graphs = round_half_away(n_images * n_superpixels / max_nodes)
    n_graphs = max(1, min(n_images, n_graphs))
    per = max(1, round_half_away(n_images / n_graphs))
    # rounding per upward can starve trailing partitions; drop the empties
    n_graphs = min(n_graphs, math.ceil(n_images / per))
    assignment = np.minimum(np.arange(n_images) // per, n_graphs - 1).astype(np.int64)
    return PartitionPlan(n_images, n_superpixels, max_nodes, n_graphs, per, assignment)


@dataclass
class SparseAffinityGraph:
    """Symmetric weighted adjacency with zero diagonal over partition nodes."""

    adjacency: SparseMatrix
    node_origins: np.ndarray  # (N, 2) int64: (image index, superpixel index)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.rows

    def edge_list(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Undirected edges as (i, j, weight) with i < j."""
        r, c, v = self.adjacency.triplets()
        keep = r < c
        return r[keep], c[keep], v[keep]


def gaussian_weights(edges: np.ndarray, embeds: np.ndarray) -> np.ndarray:
    """exp(-d_ij^2 / sigma^2) with sigma the mean Euclidean distance over the
    given edge set; if sigma is 0 every weight is 1."""
    edges = np.asarray(edges, dtype=np.int64)
    if edges.ndim != 2 or edges.shape[1] != 2 or edges.shape[0] == 0:
        raise ShapeMismatchError("expected a non-empty (E, 2) edge array")
    diff = embeds[edges[:, 0]] - embeds[edges[:, 1]]
    dist = np.sqrt((diff * diff).sum(axis=1))
    sigma = dist.mean()
    if sigma == 0.0:
        return np.ones(edges.shape[0], dtype=np.float64)
    return np.exp(-(dist * dist) / (sigma * sigma))


def _symmetric_from_edges(n: int, edges: np.ndarray, weights: np.ndarray) -> SparseMatrix:
    if edges.shape[0] == 0:
        return SparseMatrix.from_triplets(n, n, [], [], [])
    i = np.concatenate([edges[:, 0], edges[:, 1]])
    j = np.concatenate([edges[:, 1], edges[:, 0]])
    v = np.concatenate([weights, weights])
    return SparseMatrix.from_triplets(n, n, i, j, v)


def build_spatial_graph(spmaps: list[SuperpixelMap], feats: np.ndarray,
                        image_ids: list[int] | None = None) -> SparseAffinityGraph:
    """Connect superpixels of the same image that share a pixel boundary
    (4-connectivity); the result is block diagonal over the given images."""
    offsets = np.cumsum([0] + [m.node_count for m in spmaps])
    n = int(offsets[-1])
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape[0] != n:
        raise ShapeMismatchError(f"{n} nodes but {feats.shape[0]} feature rows")
    if image_ids is None:
        image_ids = list(range(len(spmaps)))

    origins = np.zeros((n, 2), dtype=np.int64)
    edge_parts = []
    for img, m in enumerate(spmaps):
        base = offsets[img]
        origins[base:base + m.node_count, 0] = image_ids[img]
        origins[base:base + m.node_count, 1] = np.arange(m.node_count)
        lab = m.labels
        pairs = []
        for a, b in ((lab[:, :-1], lab[:, 1:]), (lab[:-1, :], lab[1:, :])):
            touch = a != b
            if touch.any():
                pairs.append(np.stack([a[touch], b[touch]], axis=1))
        if pairs:
            p = np.concatenate(pairs)
            p = np.unique(np.sort(p, axis=1), axis=0)
            edge_parts.append(p + base)
    edges = (np.concatenate(edge_parts) if edge_parts
             else np.zeros((0, 2), dtype=np.int64))
    weights = gaussian_weights(edges, feats) if edges.shape[0] else np.zeros(0)
    return SparseAffinityGraph(_symmetric_from_edges(n, edges, weights), origins)


def build_knn_graph(embeds: np.ndarray, k: int,
                    node_origins: np.ndarray | None = None,
                    chunk: int = 256) -> SparseAffinityGraph:
    """Union-symmetrized k nearest neighbors by Euclidean distance over the
    whole partition; distance ties break toward the lower node index."""
    embeds = np.asarray(embeds, dtype=np.float64)
    n = embeds.shape[0]
    if n < 2:
        raise ShapeMismatchError("k-NN graph needs at least 2 nodes")
    if not 1 <= k < n:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")

    sq = (embeds * embeds).sum(axis=1)
    picks = np.empty((n, k), dtype=np.int64)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        d2 = sq[lo:hi, None] + sq[None, :] - 2.0 * (embeds[lo:hi] @ embeds.T)
        np.maximum(d2, 0.0, out=d2)
        d2[np.arange(lo, hi) - lo, np.arange(lo, hi)] = np.inf
        # stable sort keeps equal distances in index order
        picks[lo:hi] = np.argsort(d2, axis=1, kind="stable")[:, :k]

    src = np.repeat(np.arange(n, dtype=np.int64), k)
    dst = picks.ravel()
    edges = np.unique(np.sort(np.stack([src, dst], axis=1), axis=1), axis=0)
    weights = gaussian_weights(edges, embeds)
    if node_origins is None:
        node_origins = np.stack([np.zeros(n, dtype=np.int64),
                                 np.arange(n, dtype=np.int64)], axis=1)
    return SparseAffinityGraph(_symmetric_from_edges(n, edges, weights), node_origins)


@dataclass
class Hypergraph:
    """Incidence-based hypergraph with diagonal weight and degree matrices."""

    incidence: SparseMatrix       # N x M, 0/1 entries
    edge_weights: np.ndarray      # (M,) positive hyperedge weights
    node_degrees: np.ndarray      # (N,) sum_e W(e) H(i, e)
    edge_degrees: np.ndarray      # (M,) sum_i H(i, e)

    @property
    def n_nodes(self) -> int:
        return self.incidence.rows

    @property
    def n_edges(self) -> int:
        return self.incidence.cols


def _max_union(a: SparseMatrix, b: SparseMatrix) -> SparseMatrix:
    """Elementwise maximum of two same-shape nonnegative sparse matrices."""
    sa, sb = a.scipy(), b.scipy()
    return SparseMatrix._from_scipy(sa.maximum(sb).tocsr())


def build_hypergraph(spatial: SparseAffinityGraph, knn: SparseAffinityGraph | None,
                     style: str = "star") -> Hypergraph:
    """Combine spatial and k-NN affinities into one hypergraph.

    style="star": one hyperedge per node, covering the node and all of its
    neighbors in either graph; the weight is the mean affinity between the
    center and the other members (max of the two graphs where both have the
    edge), or 1 for a singleton. style="pairwise": every undirected edge
    becomes a 2-node hyperedge of that affinity, with singleton hyperedges
    of weight 1 added for isolated nodes.
    """
    n = spatial.n_nodes
    if knn is not None:
        if knn.n_nodes != n:
            raise ShapeMismatchError("spatial and k-NN graphs cover different nodes")
        merged = _max_union(spatial.adjacency, knn.adjacency)
    else:
        merged = spatial.adjacency

    if style == "star":
        rows_i, cols_i = [], []
        weights = np.empty(n, dtype=np.float64)
        for i in range(n):
            lo, hi = merged.indptr[i], merged.indptr[i + 1]
            members = np.sort(np.append(merged.indices[lo:hi], i))
            rows_i.append(members)
            cols_i.append(np.full(members.size, i, dtype=np.int64))
            vals = merged.data[lo:hi]
            weights[i] = vals.mean() if vals.size else 1.0
        incidence = SparseMatrix.from_triplets(
            n, n, np.concatenate(rows_i), np.concatenate(cols_i),
            np.ones(sum(len(r) for r in rows_i)))
    elif style == "pairwise":
        r, c, v = merged.triplets()
        keep = r < c
        er, ec, ev = r[keep], c[keep], v[keep]
        isolated = np.setdiff1d(np.arange(n), np.union1d(er, ec))
        m = er.size + isolated.size
        rows_i = np.concatenate([np.stack([er, ec], 1).ravel(), isolated])
        cols_i = np.concatenate([np.repeat(np.arange(er.size), 2),
                                 er.size + np.arange(isolated.size)])
        incidence = SparseMatrix.from_triplets(n, m, rows_i, cols_i,
                                               np.ones(rows_i.size))
        weights = np.concatenate([ev, np.ones(isolated.size)])
    else:
        raise ValueError(f"unknown hypergraph style: {style}")

    edge_degrees = incidence.transpose().row_sums()
    node_degrees = incidence.matmul_dense(weights[:, None]).ravel()
    return Hypergraph(incidence, weights, node_degrees, edge_degrees)


def normalized_graph_operator(g: SparseAffinityGraph) -> SparseMatrix:
    """Symmetrically normalized adjacency with self-loops:
    D^{-1/2} (A + I) D^{-1/2} where D sums the self-looped rows."""
    n = g.n_nodes
    r, c, v = g.adjacency.triplets()
    ri = np.concatenate([r, np.arange(n)])
    ci = np.concatenate([c, np.arange(n)])
    vi = np.concatenate([v, np.ones(n)])
    deg = np.bincount(ri, weights=vi, minlength=n)
    dinv = 1.0 / np.sqrt(deg)
    # dinv[i]*dinv[j] first: commutativity keeps the result exactly symmetric
    return SparseMatrix.from_triplets(n, n, ri, ci, vi * (dinv[ri] * dinv[ci]))


def normalized_hypergraph_operator(hg: Hypergraph) -> SparseMatrix:
    """Materialized Dv^{-1/2} H W B^{-1} H^T Dv^{-1/2} (symmetric PSD)."""
    if np.any(hg.edge_degrees < 1):
        raise ShapeMismatchError("hyperedge with no members")
    if np.any(hg.node_degrees <= 0):
        raise ShapeMismatchError("node with zero hyperedge degree")
    factors = hypergraph_propagator(hg)
    h = factors.incidence.scipy()
    # op = (Dv^-1/2 H sqrt(W/B)) times its own transpose: exactly symmetric
    half = (_sp.diags(factors.node_scale) @ h @
            _sp.diags(np.sqrt(factors.edge_scale))).tocsr()
    op = (half @ half.T).tocsr()
    op.sum_duplicates()
    op.eliminate_zeros()
    op.sort_indices()
    return SparseMatrix._from_scipy(op)


@dataclass
class HypergraphPropagator:
    """Factored form of the normalized hypergraph operator.

    Applying node_scale -> H^T -> edge_scale -> H -> node_scale reproduces
    the materialized operator but touches only the incidence nonzeros, which
    is far cheaper when hyperedges are large.
    """

    incidence: SparseMatrix    # N x M
    node_scale: np.ndarray     # (N,) Dv^{-1/2}
    edge_scale: np.ndarray     # (M,) W(e) / B(e)

    @property
    def rows(self) -> int:
        return self.incidence.rows


def hypergraph_propagator(hg: Hypergraph) -> HypergraphPropagator:
    if np.any(hg.node_degrees <= 0):
        raise ShapeMismatchError("node with zero hyperedge degree")
    return HypergraphPropagator(
        hg.incidence,
        1.0 / np.sqrt(hg.node_degrees),
        hg.edge_weights / hg.edge_degrees,
    )
