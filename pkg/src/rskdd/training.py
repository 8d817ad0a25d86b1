"""Two-stage training: detector (chamfer + point-to-point), then matching loss."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import nn
from .config import LossConfig, TrainConfig
from .detector import run_detector, sample_clusters
from .errors import NumericalError
from .geometry import PointCloud, RigidTransform
from .losses import (MatchingConfig, PairBatch, matching_loss, point_to_point_loss,
                     probabilistic_chamfer_loss)
from .model import Model
from .spatial import SpatialIndex

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "stage", "chamfer", "p2p", "matching", "total"]


class TrainingPair:
    """A source/target pair with cached spatial structures."""

    def __init__(self, source: PointCloud, target: PointCloud, gt: RigidTransform):
        self.source, self.target, self.gt = source, target, gt
        self.index = (SpatialIndex(source.positions), SpatialIndex(target.positions))
        self.trees = (cKDTree(source.positions), cKDTree(target.positions))


@dataclass
class StageResult:
    epoch_losses: list[float] = field(default_factory=list)
    step_log: list[dict] = field(default_factory=list)


def _step_seeds(seed: int, stage: int, epoch: int, i: int) -> tuple[int, int]:
    s = np.random.default_rng((seed, stage, epoch, i)).integers(0, 2**31 - 1, size=2)
    return int(s[0]), int(s[1])


def _forward_pair(model: Model, pair: TrainingPair, seeds, with_descriptors: bool):
    mc = model.cfg
    outs = []
    for cloud, index, s in zip((pair.source, pair.target), pair.index, seeds):
        clusters = sample_clusters(cloud, mc.n_candidates, mc.K, mc.alpha_d, s, mc.dilation, index)
        det = run_detector(model.detector, clusters, grad=True)
        desc = model.descriptor.forward(clusters.features, det.feature_maps) if with_descriptors else None
        outs.append((det, desc))
    (ds, qs), (dt, qt) = outs
    return PairBatch(ds.keypoints, ds.sigmas, qs, dt.keypoints, dt.sigmas, qt, pair.gt)


def _detector_loss(batch: PairBatch, pair: TrainingPair, lam: float):
    ch = probabilistic_chamfer_loss(batch)
    p2p = (point_to_point_loss(batch.src_keypoints, pair.source, pair.trees[0])
           + point_to_point_loss(batch.dst_keypoints, pair.target, pair.trees[1]))
    return ch, p2p, ch + lam * p2p


def _write_log(path, rows: list[dict], append: bool):
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "w" if new else "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def _run_stage(model: Model, pairs: list[TrainingPair], sched: TrainConfig, loss_cfg: LossConfig,
               stage: int, seed: int, ckpt_dir=None, log_path=None) -> StageResult:
    epochs = sched.stage1_epochs if stage == 1 else sched.stage2_epochs
    if stage == 1 or sched.freeze_detector:
        params = model.detector.params if stage == 1 else model.descriptor.params
    else:
        params = model.params
    opt = nn.SGD(params, sched.lr, sched.momentum)
    mcfg = MatchingConfig(loss_cfg.temperature, loss_cfg.sigma_max, loss_cfg.use_weights)
    result = StageResult()
    step = 0
    bs = max(1, sched.batch_size)
    last_good = [p.data.copy() for p in model.params]
    for epoch in range(epochs):
        order = np.random.default_rng((seed, stage, epoch)).permutation(len(pairs))
        totals = []
        for b0 in range(0, len(order), bs):
            for p in model.params:
                p.zero_grad()
            for i in order[b0:b0 + bs]:
                batch = _forward_pair(model, pairs[i], _step_seeds(seed, stage, epoch, int(i)),
                                      with_descriptors=stage == 2)
                row = {"step": step, "stage": stage, "chamfer": float("nan"),
                       "p2p": float("nan"), "matching": float("nan")}
                if stage == 1 or loss_cfg.stage2_keep_detector_loss:
                    ch, p2p, loss = _detector_loss(batch, pairs[i], loss_cfg.lambda_p2p)
                    row.update(chamfer=float(ch.data), p2p=float(p2p.data))
                if stage == 2:
                    match = matching_loss(batch, mcfg)
                    row["matching"] = float(match.data)
                    loss = match + loss if loss_cfg.stage2_keep_detector_loss else match
                row["total"] = float(loss.data)
                if not math.isfinite(row["total"]):
                    _abort(model, last_good, ckpt_dir, stage, f"non-finite loss at stage {stage} step {step}")
                nn.backward(loss * (1.0 / bs))
                result.step_log.append(row)
                totals.append(row["total"])
                step += 1
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            if not all(np.all(np.isfinite(g)) for g in grads):
                _abort(model, last_good, ckpt_dir, stage, f"non-finite gradient at stage {stage} step {step}")
            if sched.grad_clip is not None:
                grads = clip_gradients(grads, sched.grad_clip)
            opt.step(grads)
            last_good = [p.data.copy() for p in model.params]
        result.epoch_losses.append(float(np.mean(totals)) if totals else float("nan"))
        log.info("stage %d epoch %d mean loss %.6f", stage, epoch, result.epoch_losses[-1])
        if ckpt_dir is not None and sched.checkpoint_every and (epoch + 1) % sched.checkpoint_every == 0:
            model.save(Path(ckpt_dir) / f"stage{stage}_epoch{epoch + 1:03d}.ckpt", {"stage": stage})
    for p in model.params:
        p.zero_grad()
    if log_path is not None:
        _write_log(log_path, result.step_log, append=stage == 2)
    return result


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Scale ``grads`` jointly so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return [(g * scale).astype(g.dtype) for g in grads]


def _restore(model: Model, arrays):
    for p, a in zip(model.params, arrays):
        p.data = a.copy()


def _abort(model: Model, last_good, ckpt_dir, stage: int, message: str):
    _restore(model, last_good)
    if ckpt_dir is not None:
        model.save(Path(ckpt_dir) / "last_good.ckpt", {"stage": stage})
    raise NumericalError(message)


def train_stage1(model: Model, pairs: list[TrainingPair], sched: TrainConfig, loss_cfg: LossConfig,
                 seed: int = 0, ckpt_dir=None, log_path=None) -> StageResult:
    """Train the detector with the probabilistic chamfer and point-to-point losses."""
    res = _run_stage(model, pairs, sched, loss_cfg, 1, seed, ckpt_dir, log_path)
    if ckpt_dir is not None:
        model.save(Path(ckpt_dir) / "stage1.ckpt", {"stage": 1})
    return res


class _UniformWeightCounter(logging.Filter):
    """Swallows per-step uniform-weight fallback warnings, counting them instead."""

    def __init__(self):
        super().__init__()
        self.count = 0

    def filter(self, record: logging.LogRecord) -> bool:
        if "uniform keypoint weights" in record.getMessage():
            self.count += 1
            return False
        return True


def train_stage2(model: Model, pairs: list[TrainingPair], sched: TrainConfig, loss_cfg: LossConfig,
                 seed: int = 0, ckpt_dir=None, log_path=None) -> StageResult:
    """Train the descriptor with the matching loss, fine-tuning the detector unless frozen."""
    counter = _UniformWeightCounter()
    losses_log = logging.getLogger("rskdd.losses")
    losses_log.addFilter(counter)
    try:
        res = _run_stage(model, pairs, sched, loss_cfg, 2, seed, ckpt_dir, log_path)
    finally:
        losses_log.removeFilter(counter)
    if counter.count:
        log.warning("stage 2: %d keypoint sets had every uncertainty >= sigma_max=%g and used "
                    "uniform weights", counter.count, loss_cfg.sigma_max)
    if ckpt_dir is not None:
        model.save(Path(ckpt_dir) / "model.ckpt", {"stage": 2})
    return res


def detector_gradient_norm(model: Model, pair: TrainingPair, loss_cfg: LossConfig, seed: int = 0) -> float:
    """L2 norm of detector gradients under the matching loss for one pair."""
    for p in model.params:
        p.zero_grad()
    batch = _forward_pair(model, pair, (seed, seed + 1), with_descriptors=True)
    nn.backward(matching_loss(batch, MatchingConfig(loss_cfg.temperature, loss_cfg.sigma_max,
                                                    loss_cfg.use_weights)))
    norm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                         for p in model.detector.params if p.grad is not None))
    for p in model.params:
        p.zero_grad()
    return norm
