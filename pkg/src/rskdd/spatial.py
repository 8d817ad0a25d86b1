"""kd-tree index, candidate sampling and random dilation clustering."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError
from .geometry import PointCloud

log = logging.getLogger(__name__)

DILATION_MODES = ("random", "dpc")


class SpatialIndex:
    """Immutable balanced kd-tree over cloud positions with exact kNN queries."""

    def __init__(self, positions: np.ndarray):
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if len(positions) == 0:
            raise DataError("cannot index an empty cloud")
        self.positions = positions
        self._tree = cKDTree(positions, balanced_tree=True)

    def __len__(self) -> int:
        return len(self.positions)

    def query(self, points, k: int):
        """Return ``(distances, indices)`` of shape ``(Q, min(k, N))``, nearest first.

        Equidistant neighbours are ordered by ascending index.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        k = min(int(k), len(self))
        extra = min(k + 1, len(self))
        dist, idx = self._tree.query(points, k=extra)
        dist = dist.reshape(len(points), extra)
        idx = idx.reshape(len(points), extra)
        # cKDTree leaves tie order unspecified; lexsort makes it index-ordered.
        order = np.lexsort((idx, dist), axis=-1)
        dist = np.take_along_axis(dist, order, axis=-1)
        idx = np.take_along_axis(idx, order, axis=-1)
        if extra > k:
            # a tie straddling the k-th slot may hide a lower index outside the result
            for row in np.flatnonzero(dist[:, k] == dist[:, k - 1]):
                dist[row, :k], idx[row, :k] = self._exact_row(points[row], k)
        return dist[:, :k], idx[:, :k]

    def _exact_row(self, point, k):
        d = np.linalg.norm(self.positions - point, axis=1)
        order = np.lexsort((np.arange(len(d)), d))[:k]
        return d[order], order


def build_index(cloud: PointCloud) -> SpatialIndex:
    return SpatialIndex(cloud.positions)


def random_sample_candidates(cloud: PointCloud | int, M: int, seed: int) -> np.ndarray:
    """M distinct indices drawn uniformly without replacement."""
    n = cloud if isinstance(cloud, (int, np.integer)) else len(cloud)
    if M > n:
        raise ValueError(f"cannot sample {M} candidates from {n} points")
    return np.random.default_rng(seed).choice(n, size=M, replace=False)


@dataclass
class Cluster:
    """One center with K neighbours and their feature rows ``[rel xyz, dist, channels]``."""

    center_index: int
    center: np.ndarray          # (3,)
    neighbor_indices: np.ndarray  # (K,)
    neighbor_positions: np.ndarray  # (K, 3)
    features: np.ndarray        # (K, 4 + C)

    @property
    def K(self) -> int:
        return len(self.neighbor_indices)


@dataclass
class ClusterBatch:
    """M clusters stacked along the leading axis."""

    center_indices: np.ndarray    # (M,)
    centers: np.ndarray           # (M, 3)
    neighbor_indices: np.ndarray  # (M, K)
    neighbor_positions: np.ndarray  # (M, K, 3)
    features: np.ndarray          # (M, K, 4 + C)

    def __len__(self) -> int:
        return len(self.center_indices)

    def __getitem__(self, i: int) -> Cluster:
        return Cluster(int(self.center_indices[i]), self.centers[i], self.neighbor_indices[i],
                       self.neighbor_positions[i], self.features[i])

    @classmethod
    def stack(cls, clusters: list[Cluster]) -> "ClusterBatch":
        return cls(np.array([c.center_index for c in clusters], dtype=np.intp),
                   np.stack([c.center for c in clusters]),
                   np.stack([c.neighbor_indices for c in clusters]),
                   np.stack([c.neighbor_positions for c in clusters]),
                   np.stack([c.features for c in clusters]))

    def take(self, order) -> "ClusterBatch":
        order = np.asarray(order, dtype=np.intp)
        return ClusterBatch(self.center_indices[order], self.centers[order],
                            self.neighbor_indices[order], self.neighbor_positions[order],
                            self.features[order])


def cluster_features(centers: np.ndarray, neighbor_positions: np.ndarray,
                     neighbor_channels: np.ndarray) -> np.ndarray:
    rel = neighbor_positions - centers[..., None, :]
    dist = np.sqrt(np.sum(rel * rel, axis=-1, keepdims=True))
    return np.concatenate([rel, dist, neighbor_channels], axis=-1)


def _pool_size(n: int, K: int, alpha_d: int) -> tuple[int, int]:
    if K < 1 or alpha_d < 1 or int(alpha_d) != alpha_d:
        raise ValueError("K must be >= 1 and alpha_d a positive integer")
    pool = int(alpha_d) * K
    if pool > n:
        log.warning("pool of %d exceeds cloud size %d; truncating", pool, n)
        pool = n
    return pool, min(K, pool)


def _select_from_pool(pool_idx: np.ndarray, K: int, alpha_d: int, dilation: str,
                      keys: np.ndarray | None) -> np.ndarray:
    """Pick K pool members per row, keeping nearest-first order."""
    n_pool = pool_idx.shape[1]
    if K == n_pool:
        return pool_idx
    if dilation == "dpc":
        cols = np.arange(K) * int(alpha_d)
        cols = np.minimum(cols, n_pool - 1)
        return pool_idx[:, cols]
    if dilation != "random":
        raise ValueError(f"unknown dilation mode {dilation!r}")
    pick = np.sort(np.argpartition(keys, K - 1, axis=1)[:, :K], axis=1)
    return np.take_along_axis(pool_idx, pick, axis=1)


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finaliser over a uint64 array."""
    x = x ^ (x >> np.uint64(30))
    x = x * np.uint64(0xBF58476D1CE4E5B9)
    x = x ^ (x >> np.uint64(27))
    x = x * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def selection_keys(seed: int, centers, pool: int) -> np.ndarray:
    """Uniform [0, 1) keys of shape ``(len(centers), pool)``.

    Row ``i`` depends only on ``(seed, centers[i])``, so a cluster comes out the
    same whether it is built alone, in a batch, or in any chunk order.
    """
    centers = np.asarray(centers, dtype=np.int64).reshape(-1)
    with np.errstate(over="ignore"):
        base = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * _GOLDEN + np.uint64(0x636C))
        row = _mix64(base ^ (centers.astype(np.uint64) * _GOLDEN))
        x = _mix64(row[:, None] + np.arange(1, pool + 1, dtype=np.uint64)[None, :] * _GOLDEN)
    return (x >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def random_dilation_cluster(index: SpatialIndex, cloud: PointCloud, center: int, K: int,
                            alpha_d: int = 2, seed: int = 0,
                            dilation: str = "random") -> Cluster:
    """Sample K of the ``alpha_d * K`` nearest neighbours of one center."""
    pool, K = _pool_size(len(index), K, alpha_d)
    _, pool_idx = index.query(cloud.positions[center], pool)
    keys = selection_keys(seed, [center], pool)
    idx = _select_from_pool(pool_idx, K, alpha_d, dilation, keys)[0]
    c = cloud.positions[center]
    pos = cloud.positions[idx]
    return Cluster(int(center), c, idx, pos, cluster_features(c, pos, cloud.channels[idx]))


def build_clusters(index: SpatialIndex, cloud: PointCloud, centers, K: int,
                   alpha_d: int = 2, seed: int = 0, dilation: str = "random") -> ClusterBatch:
    """Vectorised :func:`random_dilation_cluster` over many centers.

    Produces exactly the clusters the single-center function would.
    """
    centers = np.asarray(centers, dtype=np.intp)
    pool, K = _pool_size(len(index), K, alpha_d)
    c = cloud.positions[centers]
    _, pool_idx = index.query(c, pool)
    keys = None
    if dilation == "random" and K < pool:
        keys = selection_keys(seed, centers, pool)
    idx = _select_from_pool(pool_idx, K, alpha_d, dilation, keys)
    pos = cloud.positions[idx]
    feats = cluster_features(c, pos, cloud.channels[idx])
    return ClusterBatch(centers, c, idx, pos, feats)


def pool_radius(index: SpatialIndex, point, n: int) -> float:
    """Distance from ``point`` to its n-th nearest indexed point."""
    d, _ = index.query(point, n)
    return float(d[0, -1])
