"""Exact k-nearest-neighbor search with deterministic tie ordering.

Queries over a fixed 3-D point set are accelerated with a kd-tree; feature
space queries (high dimension) use a blocked brute-force scan. Both return
exactly min(k, N) indices sorted by ascending squared distance, with ties
broken by ascending point index, so results are reproducible bit-for-bit
and match a naive scan on every input.

The kd-tree itself does not guarantee our tie order, so tree candidates are
re-ranked with the same squared-distance kernel a brute-force scan uses, and
rows whose k-th distance could be matched by a point outside the candidate
set are re-resolved through a ball query. The margins below only need to
cover last-ulp discrepancies between the tree's distance computation and
ours; selection stays exact.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "KnnIndex",
    "NeighborMatrix",
    "build_index",
    "query_knn",
    "query_knn_feature",
    "batch_knn",
    "batch_knn_feature",
    "self_neighbors",
    "self_neighbors_feature",
    "mean_nn_distance",
]

# Relative slack covering float discrepancies between scipy's distance and
# our squared-distance kernel (a few ulps at most).
_TIE_MARGIN = 1e-9


@dataclass(frozen=True)
class KnnIndex:
    """Immutable spatial index over a fixed N x 3 point set."""

    points: np.ndarray
    tree: cKDTree
    n: int


@dataclass(frozen=True)
class NeighborMatrix:
    """Per-query neighbor indices; row r is sorted by distance to query r.

    `k` is the realized neighbor count, which is smaller than `requested_k`
    when the indexed set is too small (the clamp flag is `clamped`).
    """

    idx: np.ndarray
    k: int
    requested_k: int

    @property
    def clamped(self):
        return self.k < self.requested_k


def build_index(points):
    """Build a kd-tree index over an (N, 3) array of finite coordinates."""
    pts = np.array(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"build_index: need an (N, 3) array, got {pts.shape}")
    if pts.shape[0] < 1:
        raise ValueError("build_index: point set is empty")
    if not np.isfinite(pts).all():
        raise ValueError("build_index: coordinates must be finite")
    pts.setflags(write=False)
    return KnnIndex(points=pts, tree=cKDTree(pts), n=pts.shape[0])


def _rank_all(points, queries, k):
    """Exact top-k per query by full scan, blocked to bound memory."""
    n, dim = points.shape
    m = queries.shape[0]
    out = np.empty((m, k), dtype=np.int64)
    block = max(1, int(32e6 / (n * dim * 8)))
    for s in range(0, m, block):
        e = min(s + block, m)
        d2 = ((queries[s:e, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        # stable argsort realizes the (distance, index) tie rule
        out[s:e] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def _exact_rows(index, queries, k):
    """Exact top-k rows over the indexed 3-D points for (M, 3) queries."""
    n = index.n
    pts = index.points
    k_eff = min(k, n)
    if k_eff == n:
        return _rank_all(pts, queries, k_eff)

    kq = min(k_eff + 1, n)
    dist, cand = index.tree.query(queries, k=kq)
    if kq == 1:
        dist = dist[:, None]
        cand = cand[:, None]
    cand = cand.astype(np.int64)

    # re-rank candidates with our own squared-distance kernel
    d2 = ((pts[cand] - queries[:, None, :]) ** 2).sum(axis=2)
    order = np.lexsort((cand, d2), axis=-1)
    d2 = np.take_along_axis(d2, order, axis=1)
    cand = np.take_along_axis(cand, order, axis=1)
    out = cand[:, :k_eff].copy()

    # points outside the candidates have tree-distance >= dist[:, -1];
    # a row is settled when that bound strictly clears its k-th distance
    t = d2[:, k_eff - 1]
    settled = (kq == n) | (dist[:, -1] ** 2 > t * (1.0 + _TIE_MARGIN))
    for row in np.flatnonzero(~settled):
        r = np.sqrt(t[row]) * (1.0 + _TIE_MARGIN)
        ball = index.tree.query_ball_point(queries[row], r)
        ids = np.union1d(np.asarray(ball, dtype=np.int64), cand[row])
        rd2 = ((pts[ids] - queries[row]) ** 2).sum(axis=1)
        out[row] = ids[np.lexsort((ids, rd2))[:k_eff]]
    return out


def query_knn(index, query, k):
    """Indices of the k nearest indexed points to a 3-vector query.

    Returns min(k, N) indices; a shorter result signals that k was clamped.
    The query need not belong to the indexed set.
    """
    if k < 1:
        raise ValueError(f"query_knn: k must be >= 1, got {k}")
    q = np.asarray(query, dtype=np.float64).reshape(1, 3)
    return _exact_rows(index, q, k)[0]


def query_knn_feature(features, query, k):
    """Exact k-NN in C-dimensional feature space by full scan."""
    if k < 1:
        raise ValueError(f"query_knn_feature: k must be >= 1, got {k}")
    feats = np.asarray(features, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    if feats.ndim != 2 or q.shape != (feats.shape[1],):
        raise ValueError(f"query_knn_feature: feature rows {feats.shape} do not "
                         f"match query of shape {q.shape}")
    return _rank_all(feats, q[None, :], min(k, feats.shape[0]))[0]


def batch_knn(index, queries, k):
    """Row-independent `query_knn` over (M, 3) queries."""
    if k < 1:
        raise ValueError(f"batch_knn: k must be >= 1, got {k}")
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != 3:
        raise ValueError(f"batch_knn: need (M, 3) queries, got {q.shape}")
    idx = _exact_rows(index, q, k)
    return NeighborMatrix(idx=idx, k=idx.shape[1], requested_k=k)


def batch_knn_feature(features, queries, k):
    """Row-independent `query_knn_feature` over (M, C) queries."""
    if k < 1:
        raise ValueError(f"batch_knn_feature: k must be >= 1, got {k}")
    feats = np.asarray(features, dtype=np.float64)
    q = np.asarray(queries, dtype=np.float64)
    if feats.ndim != 2 or q.ndim != 2 or q.shape[1] != feats.shape[1]:
        raise ValueError(f"batch_knn_feature: feature rows {feats.shape} do not "
                         f"match queries of shape {q.shape}")
    idx = _rank_all(feats, q, min(k, feats.shape[0]))
    return NeighborMatrix(idx=idx, k=idx.shape[1], requested_k=k)


def _drop_self(idx, k):
    """Remove each row's own index from its neighbor row, then trim to k."""
    m, kq = idx.shape
    keep = idx != np.arange(m)[:, None]
    # rows where self was absent drop their last (farthest) entry instead
    extra = keep.sum(axis=1) - (kq - 1)
    for row in np.flatnonzero(extra):
        last = np.flatnonzero(keep[row])[-1]
        keep[row, last] = False
    return idx[keep].reshape(m, kq - 1)[:, :k]


def self_neighbors(index, k, include_self=True):
    """Neighborhoods of the indexed points themselves.

    With `include_self` each point counts as its own (zero-distance)
    neighbor; otherwise the point's own index is removed from its row.
    """
    if include_self:
        return batch_knn(index, index.points, k)
    if index.n < 2:
        raise ValueError("self_neighbors: need >= 2 points to exclude self")
    kq = min(k + 1, index.n)
    rows = _exact_rows(index, index.points, kq)
    idx = _drop_self(rows, k)
    return NeighborMatrix(idx=idx, k=idx.shape[1], requested_k=k)


def self_neighbors_feature(features, k, include_self=True):
    """Feature-space analogue of `self_neighbors`."""
    feats = np.asarray(features, dtype=np.float64)
    if include_self:
        return batch_knn_feature(feats, feats, k)
    n = feats.shape[0]
    if n < 2:
        raise ValueError("self_neighbors_feature: need >= 2 points to exclude self")
    kq = min(k + 1, n)
    rows = _rank_all(feats, feats, kq)
    idx = _drop_self(rows, k)
    return NeighborMatrix(idx=idx, k=idx.shape[1], requested_k=k)


def mean_nn_distance(index):
    """Mean distance from each point to its nearest distinct-index neighbor."""
    if index.n < 2:
        return 0.0
    nm = self_neighbors(index, k=1, include_self=False)
    nearest = index.points[nm.idx[:, 0]]
    return float(np.sqrt(((index.points - nearest) ** 2).sum(axis=1)).mean())
