"""Geometric kernels: canonical ordering, FPS, kNN and voxel-block superpoints.

Everything here is a pure function of its inputs.  Ties are always broken
towards the smallest index, and all distances are squared Euclidean
distances on xyz computed as ``((a - b) ** 2).sum(-1)`` so that every code
path (including the test oracles) compares bit-identical numbers.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import InvalidArgument

#: Marker used in superpoint sample rows whose centroid has no superpoint.
DEGENERATE = -1


@dataclass
class PointCloud:
    """Positions, per-point features and optional labels.

    ``features`` conventionally starts with a copy of ``positions``.
    ``index`` optionally maps each point back to a source cloud (set by
    block splitting).
    """

    positions: np.ndarray
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    num_classes: Optional[int] = None
    index: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise InvalidArgument(f"positions must be N x 3, got {self.positions.shape}")
        n = self.positions.shape[0]
        if n < 1:
            raise InvalidArgument("a point cloud needs at least one point")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise InvalidArgument(f"features must be {n} x C, got {self.features.shape}")
        if not (np.isfinite(self.positions).all() and np.isfinite(self.features).all()):
            raise InvalidArgument("positions and features must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise InvalidArgument("labels must have one entry per point")
            if self.num_classes is None:
                self.num_classes = int(self.labels.max()) + 1
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise InvalidArgument("labels out of range [0, num_classes)")

    def __len__(self):
        return self.positions.shape[0]

    @property
    def n_channels(self) -> int:
        return self.features.shape[1]

    def take(self, idx) -> "PointCloud":
        """Sub-cloud with rows ``idx``; ``index`` tracks the source rows."""
        idx = np.asarray(idx, dtype=np.int64)
        source = idx if self.index is None else self.index[idx]
        return PointCloud(
            self.positions[idx],
            self.features[idx],
            None if self.labels is None else self.labels[idx],
            self.num_classes,
            source,
        )


@dataclass
class CentroidSet:
    indices: np.ndarray
    positions: np.ndarray

    def __len__(self):
        return len(self.indices)


@dataclass
class SuperpointPartition:
    assignment: np.ndarray
    members: list = field(repr=False)
    cell_size: float
    cells: np.ndarray = field(repr=False)

    @property
    def n_sp(self) -> int:
        return len(self.members)


def _positions(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.positions
    pos = np.asarray(cloud, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise InvalidArgument(f"expected an N x 3 position array, got {pos.shape}")
    return pos


def sq_dist(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Squared distances from each row of ``points`` to ``q``."""
    return ((points - q) ** 2).sum(-1)


def canonical_order(cloud) -> np.ndarray:
    """Permutation sorting points by (x, y, z, original index)."""
    pos = _positions(cloud)
    return np.lexsort((np.arange(len(pos)), pos[:, 2], pos[:, 1], pos[:, 0]))


def farthest_point_sample(cloud, m: int) -> CentroidSet:
    """Greedy farthest point sampling starting from row 0.

    The caller is expected to have put the cloud in canonical order.
    """
    pos = _positions(cloud)
    n = len(pos)
    if not 1 <= m <= n:
        raise InvalidArgument(f"need 1 <= M <= N, got M={m}, N={n}")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = 0
    mind = sq_dist(pos, pos[0])
    for t in range(1, m):
        # argmax returns the first maximum, i.e. the smallest index on ties
        nxt = int(np.argmax(mind))
        chosen[t] = nxt
        np.minimum(mind, sq_dist(pos, pos[nxt]), out=mind)
    return CentroidSet(chosen, pos[chosen].copy())


def _query_positions(queries) -> np.ndarray:
    if isinstance(queries, CentroidSet):
        return queries.positions
    return _positions(queries)


def knn(cloud, queries, k: int, method: str = "exhaustive", chunk: int = 256) -> np.ndarray:
    """Indices of the ``k`` nearest cloud points for every query.

    Returns an ``M x k`` integer table whose rows are sorted ascending by
    index.  ``method="grid"`` uses a uniform grid and gives identical results.
    """
    pos = _positions(cloud)
    q = _query_positions(queries)
    n = len(pos)
    if not 1 <= k <= n:
        raise InvalidArgument(f"need 1 <= K <= N, got K={k}, N={n}")
    if method == "grid":
        return _knn_grid(pos, q, k)
    if method != "exhaustive":
        raise InvalidArgument(f"unknown kNN method {method!r}")
    out = np.empty((len(q), k), dtype=np.int64)
    for start in range(0, len(q), chunk):
        d2 = ((pos[None, :, :] - q[start:start + chunk, None, :]) ** 2).sum(-1)
        # stable sort keeps ascending index order among equal distances
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        out[start:start + chunk] = np.sort(order, axis=1)
    return out


def _knn_grid(pos: np.ndarray, q: np.ndarray, k: int) -> np.ndarray:
    n = len(pos)
    lo = pos.min(0)
    extent = float((pos.max(0) - lo).max())
    # aim for about k points per occupied cell
    h = extent * (k / n) ** (1.0 / 3.0)
    if not h > 0:
        h = 1.0
    cells = np.floor((pos - lo) / h).astype(np.int64)
    buckets: dict = {}
    for i, c in enumerate(map(tuple, cells.tolist())):
        buckets.setdefault(c, []).append(i)
    buckets = {c: np.asarray(v, dtype=np.int64) for c, v in buckets.items()}
    cmax = cells.max(0).tolist()

    out = np.empty((len(q), k), dtype=np.int64)
    for qi, qp in enumerate(q):
        c = np.floor((qp - lo) / h).astype(np.int64).tolist()
        found = []
        r = 0
        while True:
            # the shell at Chebyshev radius r, clipped to the occupied range
            ranges = [range(max(c[a] - r, 0), min(c[a] + r, cmax[a]) + 1) for a in range(3)]
            for cell in itertools.product(*ranges):
                if max(abs(cell[a] - c[a]) for a in range(3)) == r and cell in buckets:
                    found.append(buckets[cell])
            covers_all = all(c[a] - r <= 0 and c[a] + r >= cmax[a] for a in range(3))
            if found and sum(len(b) for b in found) >= k:
                cand = np.sort(np.concatenate(found))
                d2 = sq_dist(pos[cand], qp)
                order = np.argsort(d2, kind="stable")
                if covers_all:
                    break
                # unseen points lie outside the searched cube of cells
                box_lo = lo + (np.asarray(c) - r) * h
                box_hi = lo + (np.asarray(c) + r + 1) * h
                bound = min(float((qp - box_lo).min()), float((box_hi - qp).min()))
                if bound > 0 and d2[order[k - 1]] < bound * bound * (1.0 - 1e-9):
                    break
            r += 1
        out[qi] = np.sort(cand[order[:k]])
    return out


def voxel_partition(cloud, cell_size: float = 1.0, cap: int = 32) -> SuperpointPartition:
    """Group points into occupied voxel cells, keeping at most ``cap`` cells.

    When more cells are occupied than ``cap``, the most populous cells are
    kept (ties towards the lexicographically smallest cell) and every other
    point joins the kept superpoint whose mean position is nearest.
    """
    if not cell_size > 0:
        raise InvalidArgument(f"cell_size must be positive, got {cell_size}")
    if cap < 1:
        raise InvalidArgument(f"cap must be >= 1, got {cap}")
    pos = _positions(cloud)
    vox = np.floor(pos / cell_size).astype(np.int64)
    cells, inverse, counts = np.unique(vox, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n_cells = len(cells)

    if n_cells <= cap:
        kept = np.arange(n_cells)
    else:
        # cells come lexicographically sorted from np.unique; stable sort on
        # -count keeps that order among equal populations
        rank = np.argsort(-counts, kind="stable")
        kept = np.sort(rank[:cap])

    new_id = np.full(n_cells, -1, dtype=np.int64)
    new_id[kept] = np.arange(len(kept))
    assignment = new_id[inverse]

    dropped = np.flatnonzero(assignment < 0)
    if len(dropped):
        means = np.stack([pos[inverse == c].mean(0) for c in kept])
        for i in dropped:
            assignment[i] = int(np.argmin(sq_dist(means, pos[i])))

    members = [np.flatnonzero(assignment == s) for s in range(len(kept))]
    return SuperpointPartition(assignment, members, float(cell_size), cells[kept])


def sample_superpoint_peers(centroid_sp: np.ndarray, k_sp: int, rng_seed: int) -> np.ndarray:
    """Sample ``k_sp`` same-superpoint peers for every centroid.

    ``centroid_sp[i]`` is the superpoint id of centroid ``i`` (negative for
    none).  Rows of centroids without a superpoint are filled with
    :data:`DEGENERATE`.
    """
    if k_sp < 1:
        raise InvalidArgument(f"K_sp must be >= 1, got {k_sp}")
    centroid_sp = np.asarray(centroid_sp, dtype=np.int64)
    rng = np.random.default_rng(rng_seed)
    out = np.full((len(centroid_sp), k_sp), DEGENERATE, dtype=np.int64)
    pools = {}
    for i, s in enumerate(centroid_sp):
        if s < 0:
            continue
        pool = pools.get(s)
        if pool is None:
            pool = pools[s] = np.flatnonzero(centroid_sp == s)
        out[i] = rng.choice(pool, k_sp, replace=len(pool) < k_sp)
    return out


def sample_superpoint_centroids(partition: SuperpointPartition, centroids: CentroidSet,
                                k_sp: int, rng_seed: int) -> np.ndarray:
    """Peer samples for centroids whose indices point into the partitioned cloud."""
    return sample_superpoint_peers(partition.assignment[centroids.indices], k_sp, rng_seed)
