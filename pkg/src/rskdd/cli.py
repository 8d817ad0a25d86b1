"""Command-line interface: ``rskdd <command> [options]``.

Every command resolves one run configuration (YAML file plus ``--set``
overrides), echoes it to ``runs/<name>/config.resolved`` and writes its
artifacts under that run directory unless told otherwise.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as config_mod
from .config import RunConfig
from .data import (load_manifest, make_test_pairs, make_training_pairs, preprocess_cloud,
                   read_scan, synth_pair_with_features, write_synthetic_sequence)
from .errors import ConfigError, DataError, NumericalError, RskddError
from .evaluation import (BENCH_KEYPOINTS, BENCH_POINTS, PairInput, bench_grid, evaluate_corpus,
                         write_bench_csv)
from .formats import (read_cache_key, read_cloud_cache, write_cloud_cache, write_descriptors_bin,
                      write_keypoints_bin, write_keypoints_csv)
from .geometry import PointCloud
from .model import Model
from .registration import match_descriptors, ransac_register

log = logging.getLogger("rskdd")

EXIT_OK = 0
EXIT_ERROR = RskddError.exit_code
EXIT_CONFIG = ConfigError.exit_code
EXIT_DATA = DataError.exit_code
EXIT_NUMERICAL = NumericalError.exit_code
EXIT_PARTIAL = 5

HELD_OUT_SEED_OFFSET = 10_000
CACHE_SUFFIX = ".pcc"


# ---------------------------------------------------------------------------
# Run setup
# ---------------------------------------------------------------------------


def resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    for flag, key in (("name", "name"), ("output_root", "output_root"), ("seed", "seed"),
                      ("threads", "threads")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    if getattr(args, "fast", False):
        overrides.append("deterministic=false")
    return config_mod.load(args.config, overrides)


def effective_threads(cfg: RunConfig) -> int:
    return 1 if cfg.deterministic else cfg.threads


def prepare_run(cfg: RunConfig, command: str, verbose: bool = False) -> Path:
    run = cfg.run_dir
    for sub in ("checkpoints", "reports", "logs"):
        (run / sub).mkdir(parents=True, exist_ok=True)
    (run / "config.resolved").write_text(cfg.dump())
    root = logging.getLogger("rskdd")
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    fh = logging.FileHandler(run / "logs" / f"{command}.log", mode="w")
    fh.setFormatter(fmt)
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    sh.setLevel(logging.DEBUG if verbose else logging.WARNING)
    root.addHandler(fh)
    root.addHandler(sh)
    return run


def default_checkpoint(cfg: RunConfig, given: str | None) -> Path:
    return Path(given) if given else cfg.run_dir / "checkpoints" / "model.ckpt"


# ---------------------------------------------------------------------------
# Clouds and corpora
# ---------------------------------------------------------------------------


def cache_key(scan_path: Path, cfg: RunConfig) -> str:
    h = hashlib.sha256(Path(scan_path).read_bytes())
    pp = cfg.preprocess
    h.update(json.dumps([pp.voxel_size, pp.k_normal, pp.n_points, cfg.seed]).encode())
    return h.hexdigest()


def cache_dir(cfg: RunConfig) -> Path:
    return cfg.run_dir / "cache"


def preprocess_scan(path: Path, cfg: RunConfig) -> PointCloud:
    pp = cfg.preprocess
    return preprocess_cloud(read_scan(path), pp.voxel_size, pp.k_normal, pp.n_points, cfg.seed)


def load_cloud(path, cfg: RunConfig) -> PointCloud:
    """Read a preprocessed cache file, or preprocess a raw ``.bin`` scan.

    A raw scan whose cache entry in the run directory is current is read from
    the cache instead.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"input not found: {path}")
    if path.suffix == CACHE_SUFFIX:
        _, pos, ch = read_cloud_cache(path)
        return PointCloud(pos, ch)
    cached = cache_dir(cfg) / (path.stem + CACHE_SUFFIX)
    if cached.exists() and read_cache_key(cached) == cache_key(path, cfg):
        _, pos, ch = read_cloud_cache(cached)
        return PointCloud(pos, ch)
    return preprocess_scan(path, cfg)


def _synthetic_loader(seed: int, cfg: RunConfig):
    sc = cfg.data.synthetic

    def load():
        return synth_pair_with_features(seed, sc.n_points, sc.structure, sc.jitter, sc.overlap,
                                        cfg.preprocess.k_normal)
    return load


def _frame_loader(manifest, pair, cfg: RunConfig):
    def load():
        return (load_cloud(manifest.scans[pair.source], cfg),
                load_cloud(manifest.scans[pair.target], cfg), pair.transform)
    return load


def _manifest(cfg: RunConfig):
    d = cfg.data
    if not d.sequence_dir:
        raise ConfigError("data.sequence_dir is required when data.kind is 'kitti'")
    return load_manifest(d.sequence_dir, d.poses, d.calibration)


def corpus(cfg: RunConfig, split: str) -> list[PairInput]:
    """Frame pairs for ``split`` ('train' or 'test') as lazily loaded inputs."""
    if cfg.data.kind == "synthetic":
        sc = cfg.data.synthetic
        if split == "train":
            seeds = range(sc.pairs)
        else:
            seeds = range(HELD_OUT_SEED_OFFSET, HELD_OUT_SEED_OFFSET + sc.held_out)
        return [PairInput(f"synth-{s}", _synthetic_loader(s, cfg)) for s in seeds]
    m = _manifest(cfg)
    pairs = make_training_pairs(m, cfg.data.train_stride) if split == "train" \
        else make_test_pairs(m, cfg.data.test_window)
    return [PairInput(f"{m.sequence_id}:{p.source:06d}-{p.target:06d}", _frame_loader(m, p, cfg))
            for p in pairs]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    m = write_synthetic_sequence(args.out_dir, cfg.seed, args.frames, args.points, args.identical,
                                 cfg.data.synthetic.jitter)
    print(json.dumps({"sequence_dir": str(args.out_dir), "frames": len(m)}))
    return EXIT_OK


def cmd_preprocess(args, cfg: RunConfig) -> int:
    seq = args.sequence_dir or cfg.data.sequence_dir
    if not seq:
        raise ConfigError("no sequence directory: pass one or set data.sequence_dir")
    seq = Path(seq)
    scan_dir = seq / "velodyne" if (seq / "velodyne").is_dir() else seq
    if not scan_dir.is_dir():
        raise DataError(f"sequence directory not found: {scan_dir}")
    scans = sorted(scan_dir.glob("*.bin"))
    if not scans:
        raise DataError(f"no .bin scans under {scan_dir}")
    out = Path(args.cache) if args.cache else cache_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    stats = {"processed": [], "cached": [], "failed": []}
    for scan in scans:
        target = out / (scan.stem + CACHE_SUFFIX)
        key = cache_key(scan, cfg)
        if read_cache_key(target) == key:
            stats["cached"].append(scan.name)
            continue
        try:
            cloud = preprocess_scan(scan, cfg)
        except DataError as exc:
            log.warning("skipping %s: %s", scan.name, exc)
            stats["failed"].append(scan.name)
            continue
        write_cloud_cache(target, cloud.positions, cloud.channels, key)
        stats["processed"].append(scan.name)
    print(json.dumps({k: len(v) for k, v in stats.items()} | {"failed_scans": stats["failed"]}))
    if stats["failed"]:
        return EXIT_DATA if len(stats["failed"]) == len(scans) else EXIT_PARTIAL
    return EXIT_OK


def _run_model(args, cfg: RunConfig):
    model = Model.load(default_checkpoint(cfg, args.checkpoint), dtype=cfg.dtype)
    cloud = load_cloud(args.scan, cfg)
    top = args.top or model.cfg.n_candidates
    return model.run(cloud, cfg.seed, M_out=top, threads=effective_threads(cfg))


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out) if args.out else cfg.run_dir / "reports"
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_detect(args, cfg: RunConfig) -> int:
    kps, _ = _run_model(args, cfg)
    out = _out_dir(args, cfg)
    stem = Path(args.scan).stem
    write_keypoints_csv(out / f"{stem}.keypoints.csv", kps.keypoints, kps.sigmas)
    write_keypoints_bin(out / f"{stem}.keypoints.bin", kps.keypoints, kps.sigmas)
    print(json.dumps({"keypoints": len(kps), "out": str(out)}))
    return EXIT_OK


def cmd_describe(args, cfg: RunConfig) -> int:
    kps, desc = _run_model(args, cfg)
    out = _out_dir(args, cfg)
    stem = Path(args.scan).stem
    write_keypoints_bin(out / f"{stem}.keypoints.bin", kps.keypoints, kps.sigmas)
    write_descriptors_bin(out / f"{stem}.descriptors.bin", desc.descriptors)
    print(json.dumps({"keypoints": len(kps), "dim": desc.dim, "out": str(out)}))
    return EXIT_OK


def cmd_register(args, cfg: RunConfig) -> int:
    model = Model.load(default_checkpoint(cfg, args.checkpoint), dtype=cfg.dtype)
    threads = effective_threads(cfg)
    top = args.top or model.cfg.n_candidates
    views = [model.run(load_cloud(p, cfg), cfg.seed, M_out=top, threads=threads)
             for p in (args.source, args.target)]
    (ks, qs), (kt, qt) = views
    corr = match_descriptors(qs.descriptors, qt.descriptors, mutual=cfg.eval.ransac.mutual)
    res = ransac_register(corr, ks.keypoints, kt.keypoints, cfg.eval.ransac)
    text = res.dumps() + "\n"
    out = Path(args.out) if args.out else cfg.run_dir / "reports" / "register.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    model = Model.load(default_checkpoint(cfg, args.checkpoint), dtype=cfg.dtype)
    report = evaluate_corpus(corpus(cfg, "test"), model, cfg.eval, cfg.seed, effective_threads(cfg))
    report.meta = {"checkpoint": str(default_checkpoint(cfg, args.checkpoint)), "seed": cfg.seed,
                   "data_kind": cfg.data.kind}
    out = _out_dir(args, cfg)
    report.write(out)
    print(json.dumps(report.to_json()["aggregate"], sort_keys=True))
    if report.skipped:
        return EXIT_PARTIAL if report.rows else EXIT_DATA
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    from .training import TrainingPair, train_stage1, train_stage2

    run = cfg.run_dir
    ckpt_dir = run / "checkpoints"
    log_path = run / "logs" / "train.csv"
    pairs = []
    for p in corpus(cfg, "train"):
        src, dst, gt = p.load()
        pairs.append(TrainingPair(src, dst, gt))
    if not pairs:
        raise DataError("training corpus is empty")
    summary = {}
    if args.stage in ("1", "both"):
        model = Model(cfg.model, seed=cfg.seed, dtype=cfg.dtype)
        res = train_stage1(model, pairs, cfg.train, cfg.loss, cfg.seed, ckpt_dir, log_path)
        summary["stage1_epoch_losses"] = res.epoch_losses
    else:
        model = Model.load(ckpt_dir / "stage1.ckpt", dtype=cfg.dtype)
    if args.stage in ("2", "both"):
        res = train_stage2(model, pairs, cfg.train, cfg.loss, cfg.seed, ckpt_dir, log_path)
        summary["stage2_epoch_losses"] = res.epoch_losses
    print(json.dumps(summary))
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    ckpt = default_checkpoint(cfg, args.checkpoint)
    if args.checkpoint or ckpt.exists():
        model = Model.load(ckpt, dtype=cfg.dtype)
    else:
        log.info("no checkpoint at %s; timing an untrained model", ckpt)
        model = Model(cfg.model, seed=cfg.seed, dtype=cfg.dtype)
    clouds = {n: synth_pair_with_features(cfg.seed, n, k_normal=cfg.preprocess.k_normal)[0]
              for n in BENCH_POINTS}
    rows = bench_grid(model, clouds, BENCH_KEYPOINTS, args.repeats, cfg.seed, effective_threads(cfg))
    out = Path(args.out) if args.out else cfg.run_dir / "reports" / "bench.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_bench_csv(rows, out)
    for r in rows:
        print(f"{r['input_points']:>6} {r['keypoints']:>4} {r['time_ms']:9.1f} ms")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "detect": cmd_detect,
    "describe": cmd_describe, "register": cmd_register, "eval": cmd_eval,
    "train": cmd_train, "bench": cmd_bench,
}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set model.K=64 (repeatable)")
    common.add_argument("--name", help="run name (output goes to <output-root>/<name>)")
    common.add_argument("--output-root", dest="output_root", help="root of run directories")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--threads", type=int, help="worker threads (ignored in deterministic mode)")
    common.add_argument("--fast", action="store_true", help="disable deterministic mode")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="rskdd", description="Random-sample keypoint detection, "
                                     "description and registration for LiDAR point clouds.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic KITTI-style sequence")
    p.add_argument("out_dir", type=Path)
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--points", type=int, default=20000)
    p.add_argument("--identical", action="store_true", help="every frame is the same scan")

    p = sub.add_parser("preprocess", parents=[common], help="voxel-filter, attach features, sample, cache")
    p.add_argument("sequence_dir", nargs="?", help="defaults to data.sequence_dir")
    p.add_argument("--cache", help="cache directory (default <run>/cache)")

    for name, text in (("detect", "write keypoints (CSV + binary) for one scan"),
                       ("describe", "write keypoints and descriptors for one scan")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("scan", help="raw .bin scan or preprocessed .pcc cache file")
        p.add_argument("--checkpoint", help="default <run>/checkpoints/model.ckpt")
        p.add_argument("--top", type=int, help="keep the N lowest-uncertainty keypoints")
        p.add_argument("--out", help="output directory (default <run>/reports)")

    p = sub.add_parser("register", parents=[common], help="estimate the rigid transform between two scans")
    p.add_argument("source")
    p.add_argument("target")
    p.add_argument("--checkpoint")
    p.add_argument("--top", type=int)
    p.add_argument("--out", help="result JSON path (default <run>/reports/register.json)")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="report directory (default <run>/reports)")

    p = sub.add_parser("train", parents=[common], help="two-stage training")
    p.add_argument("--stage", choices=["1", "2", "both"], default="both")

    p = sub.add_parser("bench", parents=[common], help="detect+describe timing grid")
    p.add_argument("--checkpoint")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", help="CSV path (default <run>/reports/bench.csv)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        prepare_run(cfg, args.command, args.verbose)
        np.seterr(over="ignore", under="ignore")
        return COMMANDS[args.command](args, cfg)
    except RskddError as exc:
        label = {ConfigError: "config error", DataError: "data error"}.get(type(exc), "error")
        if isinstance(exc, NumericalError):
            label = "numerical error"
        print(f"{label}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
