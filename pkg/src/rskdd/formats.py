"""Keypoint, descriptor and preprocessed-cloud files.

Binary layouts (all little-endian):

keypoints  ``b"RSKDDKPT"`` u32 version, u32 count, then count x (x, y, z, sigma) f32
descriptors ``b"RSKDDDSC"`` u32 version, u32 dim, u32 count, then count x dim f32
cloud cache ``b"RSKDDPCC"`` see :func:`write_cloud_cache`
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

KEYPOINT_MAGIC = b"RSKDDKPT"
DESCRIPTOR_MAGIC = b"RSKDDDSC"
FORMAT_VERSION = 1


def _check_header(raw: bytes, magic: bytes, n_fields: int, path) -> tuple[int, ...]:
    head = len(magic) + 4 * n_fields
    if len(raw) < head or raw[:len(magic)] != magic:
        raise DataError(f"{path}: not a {magic.decode()} file")
    fields = struct.unpack_from(f"<{n_fields}I", raw, len(magic))
    if fields[0] != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported version {fields[0]}")
    return fields


def write_keypoints_bin(path, keypoints, sigmas) -> None:
    rec = _keypoint_records(keypoints, sigmas)
    Path(path).write_bytes(KEYPOINT_MAGIC + struct.pack("<2I", FORMAT_VERSION, len(rec)) + rec.tobytes())


def read_keypoints_bin(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    _, count = _check_header(raw, KEYPOINT_MAGIC, 2, path)
    start = len(KEYPOINT_MAGIC) + 8
    if len(raw) != start + 16 * count:
        raise DataError(f"{path}: expected {count} keypoint records, file size disagrees")
    rec = np.frombuffer(raw, dtype="<f4", offset=start).reshape(count, 4)
    return rec[:, :3].copy(), rec[:, 3].copy()


def write_keypoints_csv(path, keypoints, sigmas) -> None:
    rec = _keypoint_records(keypoints, sigmas)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "z", "sigma"])
        w.writerows([[repr(float(v)) for v in row] for row in rec])


def read_keypoints_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    rec = np.array([[r["x"], r["y"], r["z"], r["sigma"]] for r in rows], dtype=np.float32).reshape(-1, 4)
    return rec[:, :3], rec[:, 3]


def _keypoint_records(keypoints, sigmas) -> np.ndarray:
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 3)
    sg = np.asarray(sigmas, dtype=np.float64).reshape(-1)
    if len(kp) != len(sg):
        raise ValueError(f"{len(kp)} keypoints but {len(sg)} uncertainties")
    return np.column_stack([kp, sg]).astype("<f4")


def write_descriptors_bin(path, descriptors) -> None:
    d = np.ascontiguousarray(np.asarray(descriptors), dtype="<f4")
    if d.ndim != 2:
        raise ValueError("descriptors must be (M, d)")
    m, dim = d.shape
    Path(path).write_bytes(DESCRIPTOR_MAGIC + struct.pack("<3I", FORMAT_VERSION, dim, m) + d.tobytes())


def read_descriptors_bin(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    _, dim, count = _check_header(raw, DESCRIPTOR_MAGIC, 3, path)
    start = len(DESCRIPTOR_MAGIC) + 12
    if len(raw) != start + 4 * dim * count:
        raise DataError(f"{path}: header says {count}x{dim} descriptors, file size disagrees")
    return np.frombuffer(raw, dtype="<f4", offset=start).reshape(count, dim).copy()


CLOUD_MAGIC = b"RSKDDPCC"


def write_cloud_cache(path, positions, channels, key: str) -> None:
    """Preprocessed cloud: magic, u32 version, u32 key length, key bytes, u32 N, u32 C, f8 rows."""
    pos = np.asarray(positions, dtype="<f8").reshape(-1, 3)
    ch = np.zeros((len(pos), 0), dtype="<f8") if channels is None else np.asarray(channels, dtype="<f8")
    kb = key.encode()
    head = CLOUD_MAGIC + struct.pack("<2I", FORMAT_VERSION, len(kb)) + kb
    body = struct.pack("<2I", len(pos), ch.shape[1]) + np.column_stack([pos, ch]).astype("<f8").tobytes()
    Path(path).write_bytes(head + body)


def read_cloud_cache(path) -> tuple[str, np.ndarray, np.ndarray | None]:
    raw = Path(path).read_bytes()
    _, klen = _check_header(raw, CLOUD_MAGIC, 2, path)
    off = len(CLOUD_MAGIC) + 8
    key = raw[off:off + klen].decode()
    off += klen
    if len(raw) < off + 8:
        raise DataError(f"{path}: truncated cloud cache")
    n, c = struct.unpack_from("<2I", raw, off)
    off += 8
    if len(raw) != off + 8 * n * (3 + c):
        raise DataError(f"{path}: cloud cache size disagrees with header")
    rows = np.frombuffer(raw, dtype="<f8", offset=off).reshape(n, 3 + c)
    return key, rows[:, :3].copy(), (rows[:, 3:].copy() if c else None)


def read_cache_key(path) -> str | None:
    """Key stored in a cache file, or None when the file is missing or unreadable."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(len(CLOUD_MAGIC) + 8)
            if len(head) < len(CLOUD_MAGIC) + 8 or head[:len(CLOUD_MAGIC)] != CLOUD_MAGIC:
                return None
            _, klen = struct.unpack_from("<2I", head, len(CLOUD_MAGIC))
            return fh.read(klen).decode()
    except OSError:
        return None
