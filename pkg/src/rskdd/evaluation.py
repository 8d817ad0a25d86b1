"""Repeatability, precision and registration metrics over frame-pair corpora."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy.spatial import cKDTree

from .config import EvalConfig, RansacConfig
from .detector import run_detector, sample_clusters, selection_order
from .descriptor import describe
from .geometry import PointCloud, RigidTransform
from .registration import match_descriptors, ransac_register
from .spatial import build_index

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


def _points(x) -> np.ndarray:
    return np.asarray(getattr(x, "keypoints", x), dtype=np.float64).reshape(-1, 3)


def repeatability(src_kp, dst_kp, gt: RigidTransform, eps_r: float = 0.5) -> float:
    """Fraction of gt-aligned source keypoints with a target keypoint closer than ``eps_r``."""
    src, dst = _points(src_kp), _points(dst_kp)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("keypoint sets must be non-empty")
    d, _ = cKDTree(dst).query(gt.apply(src), k=1)
    return float(np.mean(d < eps_r))


def precision(src_kp, src_desc, dst_kp, dst_desc, gt: RigidTransform, eps_p: float = 1.0) -> float:
    """Fraction of descriptor-NN matches landing within ``eps_p`` of the true location."""
    src, dst = _points(src_kp), _points(dst_kp)
    pairs = match_descriptors(src_desc, dst_desc)
    err = np.linalg.norm(dst[pairs[:, 1]] - gt.apply(src[pairs[:, 0]]), axis=1)
    return float(np.mean(err < eps_p))


def registration_errors(est: RigidTransform, gt: RigidTransform) -> tuple[float, float]:
    """(RTE in meters, RRE in degrees)."""
    rte = float(np.linalg.norm(est.translation - gt.translation))
    c = (np.trace(gt.rotation.T @ est.rotation) - 1.0) / 2.0
    rre = float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
    return rte, rre


def is_success(rte: float, rre: float, rte_max: float = 2.0, rre_max: float = 5.0) -> bool:
    return bool(rte < rte_max and rre < rre_max)


# ---------------------------------------------------------------------------
# Corpus evaluation
# ---------------------------------------------------------------------------

STAGES = ("sample", "cluster", "detect", "describe", "match", "ransac")


@dataclass
class PairInput:
    pair_id: str
    load: Callable[[], tuple[PointCloud, PointCloud, RigidTransform]]


def pair_columns(counts: list[int]) -> list[str]:
    cols = ["pair_id"]
    cols += [f"repeatability_{c}" for c in counts]
    cols += [f"precision_{c}" for c in counts]
    cols += ["rte", "rre", "success", "inlier_ratio", "iterations", "rmse"]
    return cols


@dataclass
class MetricsReport:
    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)
    timings: dict[str, list[float]] = field(default_factory=lambda: {s: [] for s in STAGES})
    meta: dict = field(default_factory=dict)

    def aggregate(self) -> dict:
        agg: dict = {}
        for col in self.columns[1:]:
            vals = np.array([r[col] for r in self.rows if r.get(col) is not None], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            if col == "success":
                agg["success_rate"] = float(vals.mean()) if len(vals) else None
                continue
            agg[col] = {"mean": float(vals.mean()) if len(vals) else None,
                        "std": float(vals.std()) if len(vals) else None}
        return agg

    def to_json(self) -> dict:
        return {"schema_version": REPORT_SCHEMA_VERSION, "n_pairs": len(self.rows),
                "n_skipped": len(self.skipped), "skipped": self.skipped,
                "aggregate": self.aggregate(), "meta": self.meta}

    def timing_summary(self) -> dict:
        return {s: {"mean_ms": float(np.mean(v)) * 1e3 if v else None, "n": len(v)}
                for s, v in self.timings.items()}

    def write(self, out_dir) -> None:
        """``report.json`` + ``pairs.csv`` (deterministic) and ``timings.json`` (wall clock)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        with open(out / "pairs.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _fmt(r[k]) for k in self.columns})
        (out / "timings.json").write_text(json.dumps(self.timing_summary(), indent=2, sort_keys=True) + "\n")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


class _Timer:
    def __init__(self, sink: dict, stage: str):
        self.sink, self.stage = sink, stage

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.sink[self.stage].append(time.perf_counter() - self.t0)


def evaluate_pair(model, src: PointCloud, dst: PointCloud, gt: RigidTransform, cfg: EvalConfig,
                  seed: int, ransac_seed: int, timings: dict | None = None, threads: int = 1) -> dict:
    timings = timings if timings is not None else {s: [] for s in STAGES}
    mc = model.cfg
    counts = [c for c in cfg.keypoint_counts if c <= mc.n_candidates]
    views = []
    for cloud in (src, dst):
        with _Timer(timings, "sample"):
            index = build_index(cloud)
        with _Timer(timings, "cluster"):
            clusters = sample_clusters(cloud, mc.n_candidates, mc.K, mc.alpha_d, seed,
                                       mc.dilation, index)
        with _Timer(timings, "detect"):
            out = run_detector(model.detector, clusters, threads)
        with _Timer(timings, "describe"):
            desc = describe(clusters, out.feature_maps, model.descriptor, threads).descriptors
        kp = out.keypoints.data.astype(np.float64)
        order = selection_order(out.sigmas.data, len(kp))
        views.append((kp[order], desc[order]))
    (ks, qs), (kt, qt) = views

    row: dict = {}
    for c in cfg.keypoint_counts:
        ok = c in counts
        row[f"repeatability_{c}"] = repeatability(ks[:c], kt[:c], gt, cfg.eps_r) if ok else None
        row[f"precision_{c}"] = precision(ks[:c], qs[:c], kt[:c], qt[:c], gt, cfg.eps_p) if ok else None

    m = max(counts) if counts else len(ks)
    with _Timer(timings, "match"):
        corr = match_descriptors(qs[:m], qt[:m], mutual=cfg.ransac.mutual)
    rcfg = RansacConfig(cfg.ransac.confidence, cfg.ransac.max_iterations,
                        cfg.ransac.inlier_threshold, cfg.ransac.sample_size, ransac_seed,
                        cfg.ransac.mutual)
    with _Timer(timings, "ransac"):
        res = ransac_register(corr, ks[:m], kt[:m], rcfg)
    rte, rre = registration_errors(res.transform, gt)
    row.update(rte=rte, rre=rre, success=res.success and is_success(rte, rre, cfg.rte_max, cfg.rre_max),
               inlier_ratio=res.inlier_ratio, iterations=res.iterations, rmse=res.rmse)
    return row


def evaluate_corpus(pairs: Iterable[PairInput], model, cfg: EvalConfig, seed: int = 0,
                    threads: int = 1) -> MetricsReport:
    """Evaluate every pair in order; unreadable pairs are skipped and recorded."""
    report = MetricsReport(pair_columns(list(cfg.keypoint_counts)))
    for k, pair in enumerate(pairs):
        try:
            src, dst, gt = pair.load()
        except Exception as exc:  # noqa: BLE001 - any load failure skips the pair
            log.warning("skipping pair %s: %s", pair.pair_id, exc)
            report.skipped.append({"pair_id": pair.pair_id, "error": str(exc)})
            continue
        row = evaluate_pair(model, src, dst, gt, cfg, seed, cfg.ransac.seed + k,
                            report.timings, threads)
        report.rows.append({"pair_id": pair.pair_id, **row})
    if not report.rows and not report.skipped:
        raise ValueError("empty corpus")
    return report


# ---------------------------------------------------------------------------
# Timing grid
# ---------------------------------------------------------------------------

BENCH_POINTS = (4096, 8192, 16384)
BENCH_KEYPOINTS = (128, 256, 512)


def bench_grid(model, clouds: dict[int, PointCloud], keypoints=BENCH_KEYPOINTS, repeats: int = 5,
               seed: int = 0, threads: int = 1) -> list[dict]:
    """Median detect+describe wall-clock per (input size, keypoint count).

    Covers index build, candidate sampling, clustering and both networks.
    """
    mc = model.cfg
    rows = []
    for n, cloud in clouds.items():
        for m in keypoints:
            times = []
            for r in range(repeats + 1):
                t0 = time.perf_counter()
                index = build_index(cloud)
                clusters = sample_clusters(cloud, m, mc.K, mc.alpha_d, seed + r, mc.dilation, index)
                out = run_detector(model.detector, clusters, threads)
                describe(clusters, out.feature_maps, model.descriptor, threads)
                if r:  # first run is warm-up
                    times.append(time.perf_counter() - t0)
            rows.append({"input_points": n, "keypoints": m,
                         "time_ms": float(np.median(times)) * 1e3, "threads": threads})
    return rows


def write_bench_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["input_points", "keypoints", "time_ms", "threads"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
