"""Descriptor network fusing point features, a pooled cluster feature and the attentive map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .detector import _input
from .spatial import ClusterBatch


class DescriptorNet:
    def __init__(self, in_dim: int, attentive_dim: int, widths1, widths2,
                 rng: np.random.Generator, use_attentive_map: bool = True,
                 normalize: bool = False, dtype=np.float32):
        self.mlp1 = nn.Mlp(in_dim, widths1, rng, dtype=dtype)
        cat_dim = 2 * self.mlp1.out_dim + attentive_dim
        self.mlp2 = nn.Mlp(cat_dim, widths2, rng, dtype=dtype)
        self.attentive_dim = attentive_dim
        self.use_attentive_map = use_attentive_map
        self.normalize = normalize
        self.dtype = dtype

    @property
    def params(self) -> list[nn.Tensor]:
        return self.mlp1.params + self.mlp2.params

    @property
    def dim(self) -> int:
        return self.mlp2.out_dim

    def forward(self, features, feature_maps) -> nn.Tensor:
        """``features`` (M, K, 4+C), ``feature_maps`` (M, K, Ca) -> descriptors (M, d)."""
        feats = _input(features, self.dtype)
        point = self.mlp1(feats)                                   # (M, K, Cf)
        glob = point.max(axis=1, keepdims=True)                    # (M, 1, Cf)
        glob = nn.broadcast_to(glob, point.shape)
        if self.use_attentive_map:
            fmap = nn.as_tensor(feature_maps)
        else:
            fmap = nn.Tensor(np.zeros((*point.shape[:2], self.attentive_dim), dtype=self.dtype))
        cat = nn.concat([point, glob, fmap], axis=-1)
        desc = self.mlp2(cat).max(axis=1)                          # (M, d)
        if self.normalize:
            norm = nn.sqrt(nn.sum_(desc * desc, axis=-1, keepdims=True) + 1e-12)
            desc = desc / norm
        return desc


@dataclass
class DescriptorSet:
    descriptors: np.ndarray  # (M, d)

    def __len__(self) -> int:
        return len(self.descriptors)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def take(self, order) -> "DescriptorSet":
        return DescriptorSet(self.descriptors[np.asarray(order, dtype=np.intp)])


def describe(clusters: ClusterBatch, feature_maps, net: DescriptorNet, threads: int = 1) -> DescriptorSet:
    feature_maps = np.asarray(feature_maps.data if isinstance(feature_maps, nn.Tensor) else feature_maps)
    if len(clusters) != len(feature_maps):
        raise ValueError(f"{len(clusters)} clusters but {len(feature_maps)} attentive feature maps")
    if threads <= 1 or len(clusters) < 2 * threads:
        with nn.no_grad():
            return DescriptorSet(net.forward(clusters.features, feature_maps).data.astype(np.float64))
    from concurrent.futures import ThreadPoolExecutor

    chunks = np.array_split(np.arange(len(clusters)), threads)
    with nn.no_grad(), ThreadPoolExecutor(threads) as pool:
        outs = list(pool.map(lambda ix: net.forward(clusters.features[ix], feature_maps[ix]).data,
                             chunks))
    return DescriptorSet(np.concatenate(outs).astype(np.float64))
