"""Training objectives: probabilistic chamfer, point-to-point and the soft-assignment matching loss.

All functions take and return :class:`rskdd.nn.Tensor` so they are differentiable
with respect to keypoints, saliency uncertainties and descriptors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import nn
from .geometry import PointCloud, RigidTransform

log = logging.getLogger(__name__)

#: guards the reciprocal of a zero descriptor distance
DIST_EPS = 1e-12


@dataclass
class MatchingConfig:
    temperature: float = 0.1
    sigma_max: float = 1.0
    use_weights: bool = True

    def __post_init__(self):
        if self.temperature <= 0 or self.sigma_max <= 0:
            raise ValueError("temperature and sigma_max must be positive")


@dataclass
class PairBatch:
    """Differentiable per-view outputs plus the target<-source ground truth."""

    src_keypoints: nn.Tensor
    src_sigmas: nn.Tensor
    src_descriptors: nn.Tensor
    dst_keypoints: nn.Tensor
    dst_sigmas: nn.Tensor
    dst_descriptors: nn.Tensor
    gt: RigidTransform

    def __post_init__(self):
        if self.src_keypoints.shape[0] != self.dst_keypoints.shape[0]:
            raise ValueError("source and target need the same number of keypoints")


def descriptor_sqdist(q_src, q_dst) -> nn.Tensor:
    """(M, N) squared Euclidean distances between descriptor rows."""
    q_src, q_dst = nn.as_tensor(q_src), nn.as_tensor(q_dst)
    m, d = q_src.shape
    diff = nn.reshape(q_src, (m, 1, d)) - nn.reshape(q_dst, (1, q_dst.shape[0], d))
    return nn.sum_(diff * diff, axis=-1)


def soft_assign(q_query, q_target, target_keypoints, t: float):
    """Score matrix ``softmax_j((1/d_ij)/t)`` and soft correspondences ``s @ x_target``."""
    if t <= 0:
        raise ValueError("temperature must be positive")
    d = nn.clamp_min(descriptor_sqdist(q_query, q_target), DIST_EPS)
    s = nn.softmax((1.0 / d) * (1.0 / t), axis=-1)
    return s, nn.matmul(s, nn.as_tensor(target_keypoints))


def keypoint_weights(sigmas, sigma_max: float) -> nn.Tensor:
    """``M * w / sum(w)`` with ``w = max(sigma_max - sigma, 0)``; uniform if all w vanish."""
    sigmas = nn.as_tensor(sigmas)
    m = sigmas.shape[0]
    w = nn.relu(sigma_max - sigmas)
    total = float(w.data.sum())
    if total <= 0.0:
        log.warning("all saliency uncertainties >= sigma_max; using uniform keypoint weights")
        return nn.Tensor(np.ones(m, dtype=sigmas.dtype))
    return w * (float(m) / nn.sum_(w))


def _rigid(points: nn.Tensor, gt: RigidTransform) -> nn.Tensor:
    dt = points.dtype
    return nn.matmul(points, gt.rotation.T.astype(dt)) + gt.translation.astype(dt)


def matching_loss(batch: PairBatch, cfg: MatchingConfig) -> nn.Tensor:
    """Weighted squared residuals of soft correspondences, both directions."""
    if not isinstance(batch.gt, RigidTransform):
        raise ValueError("batch.gt must be a RigidTransform")
    xs, xt = batch.src_keypoints, batch.dst_keypoints
    _, xhat_s = soft_assign(batch.src_descriptors, batch.dst_descriptors, xt, cfg.temperature)
    _, xhat_t = soft_assign(batch.dst_descriptors, batch.src_descriptors, xs, cfg.temperature)
    if cfg.use_weights:
        ws = keypoint_weights(batch.src_sigmas, cfg.sigma_max)
        wt = keypoint_weights(batch.dst_sigmas, cfg.sigma_max)
    else:
        ws = wt = 1.0
    rs = _rigid(xs, batch.gt) - xhat_s
    rt = _rigid(xhat_t, batch.gt) - xt
    return nn.sum_(ws * nn.sum_(rs * rs, axis=-1)) + nn.sum_(wt * nn.sum_(rt * rt, axis=-1))


def _nearest(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    return cKDTree(ref).query(query, k=1)[1]


def _chamfer_direction(xa: nn.Tensor, sa: nn.Tensor, xb: nn.Tensor, sb: nn.Tensor) -> nn.Tensor:
    j = _nearest(xa.data, xb.data)
    diff = xa - nn.take(xb, j, axis=0)
    dist = nn.sqrt(nn.sum_(diff * diff, axis=-1))
    sigma = (sa + nn.take(sb, j, axis=0)) * 0.5
    return nn.mean(nn.log(sigma) + dist / sigma)


def probabilistic_chamfer_loss(batch: PairBatch) -> nn.Tensor:
    """Mean of ``ln s_ij + d_i / s_ij`` over nearest keypoints, summed over both directions.

    ``s_ij`` is the mean uncertainty of the two paired keypoints; distances are
    measured after moving source keypoints into the target frame.
    """
    xs = _rigid(batch.src_keypoints, batch.gt)
    return (_chamfer_direction(xs, batch.src_sigmas, batch.dst_keypoints, batch.dst_sigmas)
            + _chamfer_direction(batch.dst_keypoints, batch.dst_sigmas, xs, batch.src_sigmas))


def point_to_point_loss(keypoints, cloud: PointCloud | np.ndarray, tree: cKDTree | None = None) -> nn.Tensor:
    """Mean squared distance from each keypoint to its nearest cloud point."""
    keypoints = nn.as_tensor(keypoints)
    pts = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud)
    if len(pts) == 0:
        raise ValueError("point-to-point loss needs a non-empty cloud")
    tree = tree if tree is not None else cKDTree(pts)
    j = tree.query(keypoints.data, k=1)[1]
    diff = keypoints - pts[j].astype(keypoints.dtype)
    return nn.mean(nn.sum_(diff * diff, axis=-1))
