"""Point-cloud container, rigid transforms and the basic geometric operators."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import AlignmentDegenerateError, DataError

log = logging.getLogger(__name__)

#: channel layout produced by :func:`estimate_normals_curvature`
NORMAL_SLICE = slice(0, 3)
CURVATURE_COL = 3
FEATURE_CHANNELS = 4


@dataclass(frozen=True)
class PointCloud:
    """N positions (meters) with a uniform-width block of per-point channels."""

    positions: np.ndarray
    channels: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.channels is None:
            ch = np.zeros((len(pos), 0))
        else:
            ch = np.asarray(self.channels, dtype=np.float64)
            if ch.ndim == 1:
                ch = ch.reshape(len(pos), -1) if len(pos) else ch.reshape(0, 0)
        if ch.ndim != 2 or len(ch) != len(pos):
            raise DataError(
                f"channels shape {ch.shape} does not match {len(pos)} positions")
        if not np.all(np.isfinite(pos)) or not np.all(np.isfinite(ch)):
            raise DataError("point cloud contains non-finite values")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "channels", ch)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def n_channels(self) -> int:
        return self.channels.shape[1]

    @property
    def has_features(self) -> bool:
        return self.n_channels == FEATURE_CHANNELS

    def subset(self, indices) -> "PointCloud":
        indices = np.asarray(indices, dtype=np.intp)
        return PointCloud(self.positions[indices], self.channels[indices])


@dataclass(frozen=True)
class RigidTransform:
    """x -> R x + t with R in SO(3)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("transform contains non-finite values")
        if (np.abs(r @ r.T - np.eye(3)).max() > 1e-6
                or abs(np.linalg.det(r) - 1.0) > 1e-6):
            raise ValueError("rotation is not in SO(3)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_axis_angle(cls, axis, angle_rad: float, translation=(0.0, 0.0, 0.0)):
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        k = np.array([[0, -axis[2], axis[1]],
                      [axis[2], 0, -axis[0]],
                      [-axis[1], axis[0], 0]])
        r = np.eye(3) + np.sin(angle_rad) * k + (1 - np.cos(angle_rad)) * (k @ k)
        return cls(r, translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


def voxel_downsample(cloud: PointCloud, grid_size: float = 0.1) -> PointCloud:
    """Replace the points of every occupied voxel by their centroid (channels averaged)."""
    if grid_size <= 0:
        raise ValueError("grid_size must be positive")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.positions / grid_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n_vox = len(counts)

    def _mean(values):
        out = np.zeros((n_vox, values.shape[1]))
        for c in range(values.shape[1]):
            out[:, c] = np.bincount(inverse, weights=values[:, c], minlength=n_vox)
        return out / counts[:, None]

    return PointCloud(_mean(cloud.positions), _mean(cloud.channels))


def normals_and_curvature(positions: np.ndarray, k_normal: int = 16,
                          tree: cKDTree | None = None):
    """PCA normals and surface variation over k nearest neighbours.

    Returns ``(normals, curvature, degenerate_mask)``. Normals point toward the
    origin (sensor position). Neighbourhoods of rank < 2 get normal +z and
    curvature 0.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    if not 3 <= k_normal <= n:
        raise ValueError(f"need N >= k_normal >= 3, got N={n}, k_normal={k_normal}")
    tree = tree if tree is not None else cKDTree(positions)
    _, idx = tree.query(positions, k=k_normal)
    nbrs = positions[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k_normal
    evals, evecs = np.linalg.eigh(cov)  # ascending
    evals = np.clip(evals, 0.0, None)
    normals = evecs[:, :, 0].copy()
    total = evals.sum(axis=1)
    degenerate = evals[:, 1] <= 1e-12 * np.maximum(evals[:, 2], 1e-300)
    curvature = np.divide(evals[:, 0], total, out=np.zeros(n), where=total > 0)

    flip = np.einsum("ni,ni->n", normals, positions) > 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    if degenerate.any():
        log.warning("%d degenerate normal neighbourhoods (rank < 2)", int(degenerate.sum()))
        normals[degenerate] = (0.0, 0.0, 1.0)
        curvature[degenerate] = 0.0
    return normals, curvature, degenerate


def estimate_normals_curvature(cloud: PointCloud, k_normal: int = 16) -> PointCloud:
    """Attach the 4 feature channels [nx, ny, nz, curvature]."""
    normals, curvature, _ = normals_and_curvature(cloud.positions, k_normal)
    return PointCloud(cloud.positions, np.column_stack([normals, curvature]))


def apply_transform(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    positions = T.apply(cloud.positions)
    channels = cloud.channels
    if cloud.n_channels >= 3:
        channels = channels.copy()
        channels[:, NORMAL_SLICE] = channels[:, NORMAL_SLICE] @ T.rotation.T
    return PointCloud(positions, channels)


def _kabsch_core(src: np.ndarray, dst: np.ndarray):
    """Batched Kabsch over leading axes. Returns (R, t, singular values)."""
    mu_s = src.mean(axis=-2, keepdims=True)
    mu_d = dst.mean(axis=-2, keepdims=True)
    h = np.swapaxes(src - mu_s, -1, -2) @ (dst - mu_d)
    u, s, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(np.swapaxes(vt, -1, -2) @ np.swapaxes(u, -1, -2)))
    d = np.where(d == 0, 1.0, d)
    diag = np.ones(s.shape)
    diag[..., 2] = d
    r = np.swapaxes(vt, -1, -2) @ (diag[..., :, None] * np.swapaxes(u, -1, -2))
    t = mu_d[..., 0, :] - np.einsum("...ij,...j->...i", r, mu_s[..., 0, :])
    return r, t, s


def kabsch_align(src, dst) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` onto ``dst``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("src and dst must have equal length")
    if len(src) < 3:
        raise AlignmentDegenerateError(f"need at least 3 pairs, got {len(src)}")
    r, t, s = _kabsch_core(src, dst)
    if s[1] <= 1e-10 * max(s[0], 1e-300):
        raise AlignmentDegenerateError("cross-covariance has rank < 2 (collinear points)")
    return RigidTransform(r, t)


def kabsch_align_batch(src: np.ndarray, dst: np.ndarray):
    """Kabsch over a batch ``(B, n, 3)``. Returns ``(R, t, valid)``."""
    r, t, s = _kabsch_core(src, dst)
    valid = s[..., 1] > 1e-10 * np.maximum(s[..., 0], 1e-300)
    return r, t, valid
