"""Detector + descriptor bundle, inference pipeline and checkpoint I/O."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .config import ModelConfig
from .descriptor import DescriptorNet, DescriptorSet, describe
from .detector import DetectorNet, KeypointSet, detect, select_keypoints
from .errors import ConfigError
from .geometry import PointCloud
from .spatial import SpatialIndex


class Model:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        in_dim = 4 + cfg.in_channels
        self.detector = DetectorNet(in_dim, cfg.detector_widths, cfg.saliency_widths, rng,
                                    cfg.attention_head, self.dtype)
        self.descriptor = DescriptorNet(in_dim, self.detector.mlp.out_dim, cfg.descriptor_widths1,
                                        cfg.descriptor_widths2, rng, cfg.use_attentive_map,
                                        cfg.normalize_descriptors, self.dtype)

    @property
    def params(self) -> list[nn.Tensor]:
        return self.detector.params + self.descriptor.params

    def detect(self, cloud: PointCloud, seed: int, M: int | None = None,
               index: SpatialIndex | None = None, threads: int = 1) -> KeypointSet:
        c = self.cfg
        return detect(cloud, self.detector, M or c.n_candidates, c.K, c.alpha_d, seed,
                      c.dilation, index, threads)

    def describe(self, kps: KeypointSet, threads: int = 1) -> DescriptorSet:
        return describe(kps.clusters, kps.feature_maps, self.descriptor, threads)

    def run(self, cloud: PointCloud, seed: int, M_out: int | None = None,
            index: SpatialIndex | None = None, threads: int = 1):
        """Detect, keep the ``M_out`` most certain keypoints and describe them."""
        kps = self.detect(cloud, seed, index=index, threads=threads)
        if M_out is not None:
            kps = select_keypoints(kps, M_out)
        return kps, self.describe(kps, threads)

    def state(self) -> list[np.ndarray]:
        return [p.data for p in self.params]

    def load_state(self, arrays) -> None:
        if len(arrays) != len(self.params):
            raise ConfigError(f"checkpoint has {len(arrays)} arrays, model expects {len(self.params)}")
        for p, a in zip(self.params, arrays):
            if p.shape != a.shape:
                raise ConfigError(f"checkpoint array shape {a.shape} != parameter {p.shape}")
            p.data = np.array(a, dtype=self.dtype)

    def save(self, path, extra: dict | None = None) -> None:
        cfg = {"model": dataclasses.asdict(self.cfg), **(extra or {})}
        nn.write_checkpoint(path, cfg, self.state(),
                            dtype="f8" if self.dtype == np.float64 else "f4")

    @classmethod
    def load(cls, path, dtype=None) -> "Model":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"missing checkpoint: expected {path}")
        cfg, arrays, stored = nn.read_checkpoint(path)
        dtype = dtype or (np.float64 if stored == "f8" else np.float32)
        model = cls(ModelConfig(**cfg["model"]), dtype=dtype)
        model.load_state(arrays)
        model.meta = cfg
        return model
