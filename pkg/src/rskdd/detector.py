"""Attentive points aggregation: keypoints, saliency uncertainties and attentive feature maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import DataError
from .geometry import PointCloud
from .spatial import ClusterBatch, SpatialIndex, build_clusters, build_index, random_sample_candidates


def _input(x, dtype) -> nn.Tensor:
    """Tensors pass through so gradients can reach the inputs."""
    return x if isinstance(x, nn.Tensor) else nn.as_tensor(np.asarray(x, dtype=dtype))


class DetectorNet:
    """Shared MLP over cluster rows, attention readout and saliency head."""

    def __init__(self, in_dim: int, widths, saliency_widths, rng: np.random.Generator,
                 attention_head: str = "channel_max", dtype=np.float32):
        self.mlp = nn.Mlp(in_dim, widths, rng, dtype=dtype)
        self.saliency = nn.Mlp(self.mlp.out_dim, saliency_widths, rng, dtype=dtype)
        if attention_head not in ("channel_max", "linear"):
            raise ValueError(f"unknown attention head {attention_head!r}")
        self.attention_head = attention_head
        self.score = nn.Mlp(self.mlp.out_dim, [1], rng, dtype=dtype) if attention_head == "linear" else None
        self.dtype = dtype

    @property
    def params(self) -> list[nn.Tensor]:
        ps = self.mlp.params + self.saliency.params
        return ps + (self.score.params if self.score is not None else [])

    def attention_scores(self, fhat: nn.Tensor) -> nn.Tensor:
        if self.score is None:
            return fhat.max(axis=-1)
        return nn.reshape(self.score(fhat), fhat.shape[:-1])

    def forward(self, features, positions, scores_override=None) -> "DetectorOutput":
        """Run the detector on stacked cluster features ``(M, K, 4+C)``.

        ``positions`` are the raw neighbour coordinates ``(M, K, 3)``.
        ``scores_override`` replaces the learned attention scores (tests only).
        """
        feats = _input(features, self.dtype)
        pos = _input(positions, self.dtype)
        fhat = self.mlp(feats)
        scores = self.attention_scores(fhat) if scores_override is None else nn.as_tensor(scores_override)
        w = nn.softmax(scores, axis=-1)                             # (M, K)
        keypoints = nn.sum_(nn.reshape(w, (*w.shape, 1)) * pos, axis=1)   # (M, 3)
        fmap = nn.reshape(w, (*w.shape, 1)) * fhat                  # (M, K, Ca)
        fglob = nn.sum_(fmap, axis=1)                               # (M, Ca)
        sigma = nn.softplus(nn.reshape(self.saliency(fglob), (fglob.shape[0],)))
        return DetectorOutput(keypoints, sigma, w, fmap, fglob)


@dataclass
class DetectorOutput:
    keypoints: nn.Tensor     # (M, 3)
    sigmas: nn.Tensor        # (M,)
    weights: nn.Tensor       # (M, K)
    feature_maps: nn.Tensor  # (M, K, Ca)
    global_features: nn.Tensor  # (M, Ca)


@dataclass
class KeypointSet:
    keypoints: np.ndarray        # (M, 3)
    sigmas: np.ndarray           # (M,)
    weights: np.ndarray          # (M, K)
    feature_maps: np.ndarray     # (M, K, Ca)
    global_features: np.ndarray  # (M, Ca)
    clusters: ClusterBatch

    def __len__(self) -> int:
        return len(self.keypoints)

    def take(self, order) -> "KeypointSet":
        order = np.asarray(order, dtype=np.intp)
        return KeypointSet(self.keypoints[order], self.sigmas[order], self.weights[order],
                           self.feature_maps[order], self.global_features[order],
                           self.clusters.take(order))

    @classmethod
    def from_output(cls, out: DetectorOutput, clusters: ClusterBatch) -> "KeypointSet":
        return cls(out.keypoints.data.astype(np.float64), out.sigmas.data.astype(np.float64),
                   out.weights.data, out.feature_maps.data, out.global_features.data, clusters)


def sample_clusters(cloud: PointCloud, M: int, K: int, alpha_d: int, seed: int,
                    dilation: str = "random", index: SpatialIndex | None = None) -> ClusterBatch:
    if not cloud.has_features:
        raise DataError("detector input needs normal/curvature channels (C=4)")
    index = index if index is not None else build_index(cloud)
    centers = random_sample_candidates(cloud, M, seed)
    return build_clusters(index, cloud, centers, K, alpha_d, seed, dilation)


def run_detector(net: DetectorNet, clusters: ClusterBatch, threads: int = 1,
                 grad: bool = False) -> DetectorOutput:
    """Forward pass; ``grad`` records the tape for training.

    Inference may be split over cluster chunks in a thread pool; chunks are
    reassembled in cluster order.
    """
    if grad:
        return net.forward(clusters.features, clusters.neighbor_positions)
    if threads <= 1 or len(clusters) < 2 * threads:
        with nn.no_grad():
            return net.forward(clusters.features, clusters.neighbor_positions)
    from concurrent.futures import ThreadPoolExecutor

    chunks = np.array_split(np.arange(len(clusters)), threads)
    with nn.no_grad(), ThreadPoolExecutor(threads) as pool:
        outs = list(pool.map(lambda ix: net.forward(clusters.features[ix],
                                                    clusters.neighbor_positions[ix]), chunks))
    cat = lambda name, ax=0: nn.Tensor(np.concatenate([getattr(o, name).data for o in outs], axis=ax))
    return DetectorOutput(cat("keypoints"), cat("sigmas"), cat("weights"),
                          cat("feature_maps"), cat("global_features"))


def detect(cloud: PointCloud, net: DetectorNet, M: int = 512, K: int = 128, alpha_d: int = 2,
           seed: int = 0, dilation: str = "random", index: SpatialIndex | None = None,
           threads: int = 1) -> KeypointSet:
    clusters = sample_clusters(cloud, M, K, alpha_d, seed, dilation, index)
    return KeypointSet.from_output(run_detector(net, clusters, threads), clusters)


def selection_order(sigmas: np.ndarray, M_out: int) -> np.ndarray:
    """Indices of the M_out smallest uncertainties; ties keep cluster order."""
    if M_out > len(sigmas):
        raise ValueError(f"cannot select {M_out} of {len(sigmas)} keypoints")
    return np.argsort(np.asarray(sigmas), kind="stable")[:M_out]


def select_keypoints(kps: KeypointSet, M_out: int) -> KeypointSet:
    return kps.take(selection_order(kps.sigmas, M_out))
