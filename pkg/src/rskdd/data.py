"""Scan/pose I/O, frame-pair construction, preprocessing and synthetic scenes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .geometry import (PointCloud, RigidTransform, estimate_normals_curvature,
                       voxel_downsample)
from .spatial import random_sample_candidates

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# KITTI-style files
# ---------------------------------------------------------------------------


def read_scan_raw(path) -> np.ndarray:
    """``(N, 4)`` little-endian float32 records (x, y, z, reflectance)."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        good = len(raw) - len(raw) % 16
        raise DataError(f"{path}: truncated scan, {len(raw) % 16} stray bytes at offset {good}")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, 4)


def read_scan(path) -> PointCloud:
    rec = read_scan_raw(path)
    finite = np.all(np.isfinite(rec[:, :3]), axis=1)
    if not finite.all():
        log.warning("%s: dropped %d non-finite points", path, int((~finite).sum()))
    return PointCloud(rec[finite, :3].astype(np.float64))


def write_scan(path, points, reflectance=None) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rec = np.zeros((len(points), 4), dtype="<f4")
    rec[:, :3] = points
    if reflectance is not None:
        rec[:, 3] = reflectance
    Path(path).write_bytes(rec.tobytes())


def read_poses(path) -> list[RigidTransform]:
    """One row-major 3x4 pose (12 floats) per line."""
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        vals = line.split()
        if len(vals) != 12:
            raise DataError(f"{path}:{lineno}: expected 12 values, got {len(vals)}")
        m = np.array(vals, dtype=np.float64).reshape(3, 4)
        try:
            poses.append(RigidTransform(m[:, :3], m[:, 3]))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return poses


def write_poses(path, poses) -> None:
    lines = [" ".join(f"{v:.12e}" for v in p.as_matrix()[:3].reshape(-1)) for p in poses]
    Path(path).write_text("\n".join(lines) + "\n")


def read_calibration(path) -> RigidTransform:
    """Velodyne->camera transform from a KITTI ``calib.txt`` (``Tr:`` row) or a bare 12-float file."""
    for line in Path(path).read_text().splitlines():
        key, _, rest = line.partition(":")
        vals = rest.split() if rest else key.split()
        if (rest and key.strip() == "Tr") or (not rest and len(vals) == 12):
            m = np.array(vals, dtype=np.float64).reshape(3, 4)
            return RigidTransform(m[:, :3], m[:, 3])
    raise DataError(f"{path}: no 'Tr' calibration row found")


@dataclass
class SequenceManifest:
    scans: list[Path]
    poses: list[RigidTransform]
    sequence_id: str = ""

    def __post_init__(self):
        if len(self.scans) != len(self.poses):
            raise DataError(f"{len(self.scans)} scans but {len(self.poses)} poses")

    def __len__(self) -> int:
        return len(self.scans)

    def relative(self, source: int, target: int) -> RigidTransform:
        """Transform mapping source-frame coordinates into the target frame."""
        return self.poses[target].inverse() @ self.poses[source]


def load_manifest(sequence_dir, poses_path=None, calibration=None,
                  sequence_id: str | None = None) -> SequenceManifest:
    seq = Path(sequence_dir)
    scan_dir = seq / "velodyne" if (seq / "velodyne").is_dir() else seq
    scans = sorted(scan_dir.glob("*.bin"))
    if not scans:
        raise DataError(f"no .bin scans under {scan_dir}")
    poses_path = Path(poses_path) if poses_path else seq / "poses.txt"
    if not poses_path.exists():
        raise DataError(f"pose file not found: {poses_path}")
    poses = read_poses(poses_path)
    if calibration:
        tr = read_calibration(calibration)
        tr_inv = tr.inverse()
        poses = [tr_inv @ p @ tr for p in poses]
    return SequenceManifest(scans, poses, sequence_id or seq.name)


@dataclass(frozen=True)
class FramePair:
    source: int
    target: int
    transform: RigidTransform = field(compare=False)


def make_training_pairs(manifest: SequenceManifest, stride: int = 10) -> list[FramePair]:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return [FramePair(i, i + stride, manifest.relative(i, i + stride))
            for i in range(len(manifest) - stride)]


def make_test_pairs(manifest: SequenceManifest, window: int = 5) -> list[FramePair]:
    """Every unordered pair of frames at most ``window`` apart, ordered (i < j)."""
    n = len(manifest)
    return [FramePair(i, j, manifest.relative(i, j))
            for i in range(n) for j in range(i + 1, min(n, i + window + 1))]


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def preprocess_cloud(cloud: PointCloud, voxel_size: float = 0.1, k_normal: int = 16,
                     n_points: int = 16384, seed: int = 0) -> PointCloud:
    """Voxel filter, normals/curvature, then a uniform random subsample of ``n_points``."""
    cloud = voxel_downsample(cloud, voxel_size)
    if len(cloud) < k_normal:
        raise DataError(f"only {len(cloud)} points after voxel filtering")
    cloud = estimate_normals_curvature(cloud, k_normal)
    if len(cloud) > n_points:
        cloud = cloud.subset(np.sort(random_sample_candidates(cloud, n_points, seed)))
    elif len(cloud) < n_points:
        log.info("cloud has %d < %d points after filtering; keeping all", len(cloud), n_points)
    return cloud


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------


@dataclass
class Scene:
    """Union of rectangles ``origin + a*u + b*v`` with ``a, b`` in [0, 1]."""

    origins: np.ndarray  # (P, 3)
    us: np.ndarray
    vs: np.ndarray
    volume: tuple | None = None  # (lo, hi) for unstructured noise scenes

    @property
    def areas(self) -> np.ndarray:
        return np.linalg.norm(np.cross(self.us, self.vs), axis=1)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.volume is not None:
            lo, hi = self.volume
            return rng.uniform(lo, hi, size=(n, 3))
        p = self.areas / self.areas.sum()
        k = rng.choice(len(p), size=n, p=p)
        ab = rng.random((n, 2))
        return self.origins[k] + ab[:, :1] * self.us[k] + ab[:, 1:] * self.vs[k]

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Distance from each point to the nearest rectangle."""
        best = np.full(len(points), np.inf)
        for o, u, v in zip(self.origins, self.us, self.vs):
            rel = points - o
            a = np.clip(rel @ u / (u @ u), 0, 1)
            b = np.clip(rel @ v / (v @ v), 0, 1)
            best = np.minimum(best, np.linalg.norm(rel - a[:, None] * u - b[:, None] * v, axis=1))
        return best

    def corners(self) -> np.ndarray:
        o, u, v = self.origins, self.us, self.vs
        return np.concatenate([o, o + u, o + v, o + u + v])


def _box_faces(center, size, yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    ex = np.array([c, s, 0.0]) * size[0]
    ey = np.array([-s, c, 0.0]) * size[1]
    ez = np.array([0.0, 0.0, size[2]])
    o = np.asarray(center, dtype=np.float64) - 0.5 * ex - 0.5 * ey
    faces = [(o, ex, ez), (o, ey, ez), (o + ex, ey, ez), (o + ey, ex, ez), (o + ez, ex, ey)]
    return faces


SCENE_HALF_EXTENT = 8.0
SCENE_BOXES = 14
SCENE_POLES = 8


def make_scene(seed: int, structure: str = "boxes", half_extent: float | None = None,
               n_boxes: int | None = None, n_poles: int | None = None) -> Scene:
    rng = np.random.default_rng((seed, 0x5CE))
    L = SCENE_HALF_EXTENT if half_extent is None else half_extent
    n_boxes = SCENE_BOXES if n_boxes is None else n_boxes
    n_poles = SCENE_POLES if n_poles is None else n_poles
    if structure == "noise":
        return Scene(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)),
                     volume=(np.array([-L, -L, 0.0]), np.array([L, L, 4.0])))
    if structure != "boxes":
        raise ValueError(f"unknown scene structure {structure!r}")
    faces = [(np.array([-L, -L, 0.0]), np.array([2 * L, 0, 0.0]), np.array([0, 2 * L, 0.0]))]
    for _ in range(n_boxes):
        size = (rng.uniform(0.8, 3.0), rng.uniform(0.8, 3.0), rng.uniform(0.8, 4.0))
        faces += _box_faces((*rng.uniform(-L + 2, L - 2, 2), 0.0), size, rng.uniform(0, np.pi))
    for _ in range(n_poles):
        faces += _box_faces((*rng.uniform(-L + 1, L - 1, 2), 0.0),
                            (0.3, 0.3, rng.uniform(2.0, 4.0)), rng.uniform(0, np.pi))
    o, u, v = (np.array(x) for x in zip(*faces))
    return Scene(o, u, v)


def random_transform(rng: np.random.Generator, max_angle_deg: float = 30.0,
                     max_translation: float = 5.0) -> RigidTransform:
    """Random rigid motion, yaw-dominant like a ground vehicle."""
    axis = np.array([*rng.normal(0, 0.15, 2), 1.0])
    angle = np.deg2rad(rng.uniform(-max_angle_deg, max_angle_deg))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    offset = direction * max_translation * rng.random() ** (1 / 3)
    return RigidTransform.from_axis_angle(axis, angle, offset)


def _crop_view(scene: Scene, rng, n: int, keep) -> np.ndarray:
    out, have = [], 0
    while have < n:
        pts = scene.sample(rng, max(2 * n, 1024))
        pts = pts[keep(pts)]
        out.append(pts)
        have += len(pts)
    return np.concatenate(out)[:n]


def synth_scene(seed: int, n_points: int = 4096, structure: str = "boxes",
                jitter: float = 0.0, overlap: float = 1.0):
    """Two independently sampled views of one random scene.

    Returns ``(source, target, T)`` with ``target ≈ T(source)``; clouds carry
    positions only. ``overlap`` is the shared fraction of each view's extent
    along a random horizontal direction.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    if not 0 < overlap <= 1:
        raise ValueError("overlap must lie in (0, 1]")
    scene = make_scene(seed, structure)
    rng = np.random.default_rng((seed, 0x7A1))
    pose = random_transform(rng)   # target sensor pose in the source/scene frame
    theta = rng.uniform(0, 2 * np.pi)
    axis = np.array([np.cos(theta), np.sin(theta), 0.0])
    if scene.volume is None:
        extent = np.abs(scene.corners() @ axis).max()
    else:
        extent = float(scene.volume[1][0]) * np.sqrt(2)
    span = 2 * extent / (2 - overlap)
    lo_keep = lambda p: p @ axis <= -extent + span + 1e-9
    hi_keep = lambda p: p @ axis >= extent - span - 1e-9
    src = _crop_view(scene, rng, n_points, lo_keep)
    dst_world = _crop_view(scene, rng, n_points, hi_keep)
    if jitter > 0:
        src = src + rng.normal(0, jitter, src.shape)
        dst_world = dst_world + rng.normal(0, jitter, dst_world.shape)
    gt = pose.inverse()
    return PointCloud(src), PointCloud(gt.apply(dst_world)), gt


def synth_pair_with_features(seed: int, n_points: int = 4096, structure: str = "boxes",
                             jitter: float = 0.01, overlap: float = 0.9, k_normal: int = 16):
    src, dst, gt = synth_scene(seed, n_points, structure, jitter, overlap)
    return estimate_normals_curvature(src, k_normal), estimate_normals_curvature(dst, k_normal), gt


def write_synthetic_sequence(out_dir, seed: int = 0, n_frames: int = 12, n_points: int = 20000,
                             identical: bool = False, jitter: float = 0.01) -> SequenceManifest:
    """Write a KITTI-style sequence (``velodyne/*.bin`` + ``poses.txt``) of one scene.

    Frames follow a straight drive along +x with slight yaw drift. With
    ``identical`` every frame is the same scan at the identity pose.
    """
    out = Path(out_dir)
    (out / "velodyne").mkdir(parents=True, exist_ok=True)
    scene = make_scene(seed, "boxes")
    rng = np.random.default_rng((seed, 0x5E0))
    poses, paths = [], []
    first = None
    for f in range(n_frames):
        if identical:
            pose = RigidTransform.identity()
            if first is None:
                first = scene.sample(rng, n_points)
            pts = first
        else:
            pose = RigidTransform.from_axis_angle((0, 0, 1), 0.02 * f, (0.5 * f - 3.0, 0.0, 0.0))
            world = scene.sample(rng, n_points) + rng.normal(0, jitter, (n_points, 3))
            pts = pose.inverse().apply(world)
        path = out / "velodyne" / f"{f:06d}.bin"
        write_scan(path, pts)
        poses.append(pose)
        paths.append(path)
    write_poses(out / "poses.txt", poses)
    return SequenceManifest(paths, poses, out.name)
