import logging
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial import cKDTree

from rskdd.data import (SequenceManifest, load_manifest, make_scene, make_test_pairs, make_training_pairs,
                        preprocess_cloud, random_transform, read_calibration, read_poses, read_scan,
                        read_scan_raw, synth_pair_with_features, synth_scene, write_poses, write_scan,
                        write_synthetic_sequence)
from rskdd.errors import DataError
from rskdd.geometry import PointCloud, RigidTransform, kabsch_align


def manifest_of(n, rng=None):
    rng = rng or np.random.default_rng(0)
    poses = [RigidTransform.from_axis_angle(rng.normal(size=3), rng.uniform(0, 1), rng.normal(size=3) * 5)
             for _ in range(n)]
    return SequenceManifest([f"{i:06d}.bin" for i in range(n)], poses)


class TestScanFiles:
    def test_single_record(self, tmp_path):
        (tmp_path / "a.bin").write_bytes(struct.pack("<4f", 1, 2, 3, 0.5))
        cloud = read_scan(tmp_path / "a.bin")
        assert cloud.positions.tolist() == [[1.0, 2.0, 3.0]]

    def test_empty_file(self, tmp_path):
        (tmp_path / "a.bin").write_bytes(b"")
        assert len(read_scan(tmp_path / "a.bin")) == 0

    def test_truncated_file_reports_offset(self, tmp_path):
        (tmp_path / "a.bin").write_bytes(b"\0" * 17)
        with pytest.raises(DataError, match="offset 16"):
            read_scan(tmp_path / "a.bin")

    def test_non_finite_points_dropped(self, tmp_path, caplog):
        write_scan(tmp_path / "a.bin", [[0, 0, 0], [np.nan, 1, 1], [1, 1, 1]])
        with caplog.at_level(logging.WARNING):
            cloud = read_scan(tmp_path / "a.bin")
        assert len(cloud) == 2 and "non-finite" in caplog.text

    @given(st.integers(0, 2**32 - 1), st.integers(0, 200))
    def test_round_trip_bit_exact(self, tmp_path_factory, seed, n):
        r = np.random.default_rng(seed)
        rec = r.normal(size=(n, 4)).astype("<f4")
        path = tmp_path_factory.mktemp("scan") / "s.bin"
        write_scan(path, rec[:, :3], rec[:, 3])
        assert read_scan_raw(path).tobytes() == rec.tobytes()
        back = read_scan(path).positions
        write_scan(path.with_suffix(".2"), back, rec[:, 3])
        assert path.with_suffix(".2").read_bytes() == path.read_bytes()


class TestPosesAndCalibration:
    def test_round_trip(self, tmp_path, rng):
        poses = manifest_of(5, rng).poses
        write_poses(tmp_path / "p.txt", poses)
        for a, b in zip(poses, read_poses(tmp_path / "p.txt")):
            np.testing.assert_allclose(a.as_matrix(), b.as_matrix(), atol=1e-11)

    def test_wrong_field_count(self, tmp_path):
        (tmp_path / "p.txt").write_text("1 0 0 0 0 1 0 0 0 0 1\n")
        with pytest.raises(DataError, match=":1:"):
            read_poses(tmp_path / "p.txt")

    def test_calibration_row(self, tmp_path):
        (tmp_path / "calib.txt").write_text("P0: " + " ".join(["0"] * 12) + "\nTr: 1 0 0 1 0 1 0 2 0 0 1 3\n")
        T = read_calibration(tmp_path / "calib.txt")
        np.testing.assert_array_equal(T.translation, [1, 2, 3])

    def test_missing_calibration_row(self, tmp_path):
        (tmp_path / "calib.txt").write_text("P0: 1 2 3\n")
        with pytest.raises(DataError):
            read_calibration(tmp_path / "calib.txt")

    def test_manifest_applies_calibration(self, tmp_path):
        write_synthetic_sequence(tmp_path, n_frames=3, n_points=500)
        tr = RigidTransform.from_axis_angle([1, 0, 0], 0.3, [0.1, 0.2, 0.3])
        (tmp_path / "calib.txt").write_text("Tr: " + " ".join(str(float(v)) for v in tr.as_matrix()[:3].reshape(-1)) + "\n")
        plain = load_manifest(tmp_path)
        calibrated = load_manifest(tmp_path, calibration=tmp_path / "calib.txt")
        for p, c in zip(plain.poses, calibrated.poses):
            np.testing.assert_allclose(c.as_matrix(), (tr.inverse() @ p @ tr).as_matrix(), atol=1e-12)

    def test_manifest_errors(self, tmp_path):
        with pytest.raises(DataError):
            load_manifest(tmp_path)
        write_scan(tmp_path / "000000.bin", np.zeros((1, 3)))
        with pytest.raises(DataError, match="pose file"):
            load_manifest(tmp_path)
        with pytest.raises(DataError):
            SequenceManifest(["a.bin"], [])


class TestFramePairs:
    def test_training_pairs(self):
        pairs = make_training_pairs(manifest_of(12))
        assert [(p.source, p.target) for p in pairs] == [(0, 10), (1, 11)]

    def test_short_sequence(self):
        assert make_training_pairs(manifest_of(5)) == []

    def test_test_pairs(self):
        assert [(p.source, p.target) for p in make_test_pairs(manifest_of(3))] == [(0, 1), (0, 2), (1, 2)]
        assert make_test_pairs(manifest_of(3), window=0) == []

    def test_test_pairs_window(self):
        pairs = {(p.source, p.target) for p in make_test_pairs(manifest_of(20), 5)}
        expect = {(i, j) for i in range(20) for j in range(20) if i < j <= i + 5}
        assert pairs == expect

    def test_defaults(self):
        assert make_training_pairs.__defaults__ == (10,) and make_test_pairs.__defaults__ == (5,)

    @given(st.integers(0, 2**32 - 1))
    def test_relative_transforms_compose(self, seed):
        m = manifest_of(6, np.random.default_rng(seed))
        i, j, k = np.random.default_rng(seed).integers(0, 6, 3)
        composed = m.relative(j, k) @ m.relative(i, j)
        np.testing.assert_allclose(composed.as_matrix(), m.relative(i, k).as_matrix(), atol=1e-6)

    def test_relative_maps_source_into_target(self, rng):
        m = manifest_of(3, rng)
        world = rng.normal(size=(10, 3))
        in_src = m.poses[0].inverse().apply(world)
        in_dst = m.poses[2].inverse().apply(world)
        np.testing.assert_allclose(m.relative(0, 2).apply(in_src), in_dst, atol=1e-9)


class TestPreprocess:
    def test_output_size_and_channels(self, rng):
        pts = rng.uniform(-5, 5, size=(30000, 3)) * [1, 1, 0.2]
        out = preprocess_cloud(PointCloud(pts), n_points=4000, seed=1)
        assert len(out) == 4000 and out.n_channels == 4

    def test_keeps_all_when_few(self):
        # 1 m lattice: no two points share a voxel
        pts = np.stack(np.meshgrid(np.arange(10.0), np.arange(10.0), np.arange(5.0)), -1).reshape(-1, 3)
        assert len(preprocess_cloud(PointCloud(pts), n_points=4000)) == 500

    def test_too_few_after_filter(self):
        with pytest.raises(DataError):
            preprocess_cloud(PointCloud(np.zeros((100, 3))))

    def test_deterministic(self, rng):
        pts = PointCloud(rng.uniform(-5, 5, size=(20000, 3)))
        a, b = preprocess_cloud(pts, n_points=3000, seed=4), preprocess_cloud(pts, n_points=3000, seed=4)
        assert a.positions.tobytes() == b.positions.tobytes() and a.channels.tobytes() == b.channels.tobytes()


class TestSynthetic:
    def test_noiseless_full_overlap_lies_on_scene(self):
        src, dst, gt = synth_scene(5, 2000, jitter=0.0, overlap=1.0)
        scene = make_scene(5)
        assert scene.distance(src.positions).max() < 1e-9
        assert scene.distance(gt.inverse().apply(dst.positions)).max() < 1e-9

    def test_deterministic(self):
        a, b = synth_scene(3, 1000, jitter=0.01), synth_scene(3, 1000, jitter=0.01)
        assert a[0].positions.tobytes() == b[0].positions.tobytes()
        assert a[1].positions.tobytes() == b[1].positions.tobytes()
        np.testing.assert_array_equal(a[2].as_matrix(), b[2].as_matrix())

    def test_kabsch_recovers_transform(self, rng):
        _, _, gt = synth_scene(9, 100)
        pts = rng.normal(size=(50, 3)) * 5
        est = kabsch_align(pts, gt.apply(pts))
        np.testing.assert_allclose(est.as_matrix(), gt.as_matrix(), atol=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_motion_bounds(self, seed):
        T = random_transform(np.random.default_rng(seed))
        angle = np.degrees(np.arccos(np.clip((np.trace(T.rotation) - 1) / 2, -1, 1)))
        assert angle <= 30 + 1e-9 and np.linalg.norm(T.translation) <= 5 + 1e-9

    @pytest.mark.parametrize("jitter", [0.0, 0.01, 0.05])
    def test_aligned_views_sit_on_the_surface_within_jitter(self, jitter):
        src, dst, gt = synth_scene(2, 4000, jitter=jitter, overlap=0.7)
        scene = make_scene(2)
        # isotropic 3-d noise has mean norm about 1.6 sigma
        for pts in (src.positions, gt.inverse().apply(dst.positions)):
            assert scene.distance(pts).mean() <= 2 * jitter + 1e-9

    def test_partial_overlap_reduces_shared_area(self):
        full = synth_scene(4, 3000, overlap=1.0)
        part = synth_scene(4, 3000, overlap=0.5)

        def shared(pair):
            src, dst, gt = pair
            return np.mean(cKDTree(dst.positions).query(gt.apply(src.positions))[0] < 0.3)
        assert shared(part) < shared(full)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            synth_scene(0, 0)
        with pytest.raises(ValueError):
            synth_scene(0, 100, overlap=0.0)
        with pytest.raises(ValueError):
            make_scene(0, "city")

    def test_noise_scene(self):
        src, dst, _ = synth_scene(1, 500, structure="noise")
        assert len(src) == len(dst) == 500

    def test_features_attached(self):
        src, dst, _ = synth_pair_with_features(1, 800)
        assert src.n_channels == 4 and dst.n_channels == 4

    def test_written_sequence_reloads(self, tmp_path):
        m = write_synthetic_sequence(tmp_path, n_frames=4, n_points=300)
        back = load_manifest(tmp_path)
        assert [p.name for p in back.scans] == [p.name for p in m.scans]
        for a, b in zip(m.poses, back.poses):
            np.testing.assert_allclose(a.as_matrix(), b.as_matrix(), atol=1e-11)
        world0 = m.poses[0].apply(read_scan(back.scans[0]).positions)
        assert make_scene(0).distance(world0).max() < 0.1
