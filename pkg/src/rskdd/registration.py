"""Descriptor matching and RANSAC rigid registration."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .config import RansacConfig
from .errors import AlignmentDegenerateError
from .geometry import RigidTransform, kabsch_align, kabsch_align_batch

_BATCH = 256


def match_descriptors(src, dst, mutual: bool = False) -> np.ndarray:
    """``(n, 2)`` pairs ``(i, j)`` with j the Euclidean-nearest target descriptor of i.

    Ties go to the lower target index. With ``mutual`` only pairs that are
    nearest neighbours in both directions are kept.
    """
    src = np.asarray(getattr(src, "descriptors", src), dtype=np.float64)
    dst = np.asarray(getattr(dst, "descriptors", dst), dtype=np.float64)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("descriptor sets must be non-empty")
    d = cdist(src, dst, "sqeuclidean")
    j = np.argmin(d, axis=1)
    i = np.arange(len(src))
    if mutual:
        back = np.argmin(d, axis=0)
        keep = back[j] == i
        i, j = i[keep], j[keep]
    return np.column_stack([i, j])


def required_iterations(inlier_fraction: float, confidence: float = 0.99,
                        sample_size: int = 3, cap: int = 10000) -> int:
    """``ceil(ln(1 - p) / ln(1 - w^s))`` clipped to ``[1, cap]``."""
    w_s = inlier_fraction ** sample_size
    if w_s <= 0.0:
        return cap
    if w_s >= 1.0:
        return 1
    n = math.ceil(math.log(1.0 - confidence) / math.log(1.0 - w_s))
    return int(min(max(n, 1), cap))


@dataclass
class RegistrationResult:
    transform: RigidTransform
    inlier_mask: np.ndarray
    inlier_ratio: float
    iterations: int
    rmse: float
    success: bool

    def to_json(self) -> dict:
        return {
            "rotation": [float(v) for v in self.transform.rotation.reshape(-1)],
            "translation": [float(v) for v in self.transform.translation],
            "inlier_ratio": float(self.inlier_ratio),
            "iterations": int(self.iterations),
            "rmse": float(self.rmse),
            "success": bool(self.success),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def _failed(n: int, iterations: int) -> RegistrationResult:
    return RegistrationResult(RigidTransform.identity(), np.zeros(n, dtype=bool), 0.0,
                              iterations, float("nan"), False)


def ransac_register(correspondences, src_keypoints, dst_keypoints,
                    cfg: RansacConfig | None = None) -> RegistrationResult:
    """Estimate the target<-source transform from putative correspondences.

    Hypotheses are generated and scored in batches, but accepted strictly in
    draw order so the adaptive stopping rule and the result match a purely
    sequential loop for the same seed. Collinear minimal samples are redrawn
    and do not count as iterations.
    """
    cfg = cfg or RansacConfig()
    corr = np.asarray(correspondences, dtype=np.intp).reshape(-1, 2)
    src = np.asarray(src_keypoints, dtype=np.float64)[corr[:, 0]]
    dst = np.asarray(dst_keypoints, dtype=np.float64)[corr[:, 1]]
    n, s = len(corr), cfg.sample_size
    if n < s:
        return _failed(n, 0)

    rng = np.random.default_rng(cfg.seed)
    thr2 = cfg.inlier_threshold ** 2
    best_count, best_mask = -1, None
    needed = cfg.max_iterations
    iterations = 0
    draws = 0
    max_draws = 20 * cfg.max_iterations

    while iterations < needed and draws < max_draws:
        keys = rng.random((_BATCH, n))
        samples = (np.argpartition(keys, s, axis=1) if n > s else np.argsort(keys, axis=1))[:, :s]
        draws += _BATCH
        r, t, valid = kabsch_align_batch(src[samples], dst[samples])
        pred = np.einsum("bij,nj->bni", r, src) + t[:, None, :]
        masks = np.sum((pred - dst) ** 2, axis=-1) < thr2
        counts = masks.sum(axis=1)
        for b in range(_BATCH):
            if not valid[b]:
                continue
            iterations += 1
            if counts[b] > best_count:
                best_count, best_mask = int(counts[b]), masks[b]
                needed = required_iterations(best_count / n, cfg.confidence, s, cfg.max_iterations)
            if iterations >= needed:
                break

    if best_mask is None or best_count < s:
        return _failed(n, iterations)
    try:
        T = kabsch_align(src[best_mask], dst[best_mask])
    except AlignmentDegenerateError:
        return _failed(n, iterations)
    res = T.apply(src[best_mask]) - dst[best_mask]
    rmse = float(np.sqrt(np.mean(np.sum(res ** 2, axis=1))))
    return RegistrationResult(T, best_mask.copy(), best_count / n, iterations, rmse, True)
