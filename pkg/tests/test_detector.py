import numpy as np
import pytest
from hypothesis import given, strategies as st

from rskdd import nn
from rskdd.config import ModelConfig
from rskdd.detector import (DetectorNet, KeypointSet, detect, run_detector, sample_clusters,
                            select_keypoints, selection_order)
from rskdd.errors import DataError
from rskdd.geometry import PointCloud, RigidTransform
from gradcheck import MAX_REL_ERR, max_rel_error


def net64(seed=0, head="channel_max"):
    return DetectorNet(8, [16, 16], [16, 1], np.random.default_rng(seed), head, dtype=np.float64)


def random_clusters(rng, m=6, k=10):
    pos = rng.normal(size=(m, k, 3))
    center = pos[:, :1]
    rel = pos - center
    feats = np.concatenate([rel, np.linalg.norm(rel, axis=-1, keepdims=True),
                            rng.normal(size=(m, k, 3)), rng.random((m, k, 1))], axis=-1)
    return feats, pos


class TestAttentionAggregation:
    def test_one_hot_scores_pick_that_neighbour(self, rng):
        feats, pos = random_clusters(rng, 3, 8)
        scores = np.zeros((3, 8))
        scores[np.arange(3), [2, 5, 7]] = 1e3
        out = net64().forward(feats, pos, scores_override=scores)
        np.testing.assert_allclose(out.keypoints.data, pos[np.arange(3), [2, 5, 7]], atol=1e-6)

    def test_equal_scores_give_centroid(self, rng):
        feats, pos = random_clusters(rng, 3, 8)
        out = net64().forward(feats, pos, scores_override=np.full((3, 8), 0.7))
        np.testing.assert_allclose(out.keypoints.data, pos.mean(axis=1), atol=1e-12)

    def test_global_feature_is_weighted_row_sum(self, rng):
        feats, pos = random_clusters(rng)
        net = net64()
        out = net.forward(feats, pos)
        fhat = net.mlp(feats).data
        expected = np.einsum("mk,mkc->mc", out.weights.data, fhat)
        np.testing.assert_allclose(out.global_features.data, expected, atol=1e-6)
        np.testing.assert_allclose(out.feature_maps.data.sum(axis=1), expected, atol=1e-6)

    def test_sigmas_positive(self, rng):
        feats, pos = random_clusters(rng, 20, 8)
        assert np.all(net64().forward(feats, pos).sigmas.data > 0)

    def test_linear_attention_head(self, rng):
        feats, pos = random_clusters(rng)
        out = net64(head="linear").forward(feats, pos)
        np.testing.assert_allclose(out.weights.data.sum(axis=1), 1.0, atol=1e-12)
        with pytest.raises(ValueError):
            net64(head="mean")

    @given(st.integers(0, 2**32 - 1))
    def test_simplex_and_bounding_box(self, seed):
        r = np.random.default_rng(seed)
        feats, pos = random_clusters(r, 4, int(r.integers(1, 12)))
        out = DetectorNet(8, [8, 8], [8, 1], r, dtype=np.float64).forward(feats * 10, pos)
        w = out.weights.data
        assert np.all(w >= 0) and np.all(np.abs(w.sum(axis=1) - 1) <= 1e-6)
        kp = out.keypoints.data
        assert np.all(kp >= pos.min(axis=1) - 1e-9) and np.all(kp <= pos.max(axis=1) + 1e-9)

    def test_rigid_equivariance_with_shared_features(self, rng):
        feats, pos = random_clusters(rng)
        T = RigidTransform.from_axis_angle([0.3, -0.2, 1.1], 0.9, [4.0, -1.0, 2.5])
        net = net64()
        a = net.forward(feats, pos).keypoints.data
        b = net.forward(feats, pos @ T.rotation.T + T.translation).keypoints.data
        np.testing.assert_allclose(b, a @ T.rotation.T + T.translation, atol=1e-12)

    def test_neighbour_permutation_invariance(self, rng):
        feats, pos = random_clusters(rng)
        perm = rng.permutation(feats.shape[1])
        net = net64()
        a, b = net.forward(feats, pos), net.forward(feats[:, perm], pos[:, perm])
        np.testing.assert_allclose(a.keypoints.data, b.keypoints.data, atol=1e-12)
        np.testing.assert_allclose(a.sigmas.data, b.sigmas.data, atol=1e-12)

    def test_gradients_through_aggregation(self, rng):
        feats, pos = random_clusters(rng, 3, 5)
        coef = rng.normal(size=(3, 3))

        def f(scores, positions):
            w = nn.softmax(scores, axis=-1)
            kp = nn.sum_(nn.reshape(w, (3, 5, 1)) * positions, axis=1)
            fglob = nn.sum_(nn.reshape(w, (3, 5, 1)) * positions * positions, axis=1)
            return nn.sum_(kp * coef) + nn.sum_(nn.softplus(fglob))
        assert max_rel_error(f, rng.normal(size=(3, 5)), pos) < MAX_REL_ERR

    def test_detector_parameter_gradients(self, rng):
        feats, pos = random_clusters(rng, 3, 5)
        net = DetectorNet(8, [6, 6], [4, 1], np.random.default_rng(2), dtype=np.float64)
        # zero biases make dead-ReLU rows tie across every channel of the max
        params = [p.data + rng.normal(scale=0.1, size=p.shape) for p in net.params]

        def f(*ps):
            net.mlp.params[:] = ps[:len(net.mlp.params)]
            net.saliency.params[:] = ps[len(net.mlp.params):]
            out = net.forward(feats, pos)
            return nn.sum_(out.keypoints * out.keypoints) + nn.sum_(out.sigmas)
        assert max_rel_error(f, *params) < MAX_REL_ERR


class TestSelection:
    def test_smallest_sigma_first(self):
        assert selection_order(np.array([0.3, 0.1, 0.2]), 2).tolist() == [1, 2]

    def test_ties_keep_cluster_order(self):
        assert selection_order(np.full(5, 0.4), 1).tolist() == [0]
        assert selection_order(np.array([0.2, 0.1, 0.2, 0.1]), 4).tolist() == [1, 3, 0, 2]

    def test_full_selection_is_sort(self, rng):
        s = rng.random(30)
        np.testing.assert_array_equal(selection_order(s, 30), np.argsort(s))

    def test_too_many(self):
        with pytest.raises(ValueError):
            selection_order(np.ones(3), 4)

    @given(st.lists(st.floats(0, 5), min_size=1, max_size=40), st.data())
    def test_selected_are_the_smallest(self, sig, data):
        sig = np.array(sig)
        k = data.draw(st.integers(1, len(sig)))
        idx = selection_order(sig, k)
        rest = np.setdiff1d(np.arange(len(sig)), idx)
        assert len(set(idx.tolist())) == k
        if len(rest):
            assert sig[idx].max() <= sig[rest].min()


class TestPipeline:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.n_candidates, cfg.K, cfg.alpha_d) == (512, 128, 2)
        assert detect.__defaults__[:3] == (512, 128, 2)

    def test_requires_feature_channels(self):
        with pytest.raises(DataError):
            sample_clusters(PointCloud(np.zeros((50, 3))), 4, 8, 2, 0)

    def test_detect_shapes_and_determinism(self, small_pair):
        src = small_pair[0]
        net = DetectorNet(8, [64, 64, 64], [64, 1], np.random.default_rng(0), dtype=np.float64)
        a = detect(src, net, M=64, K=16, seed=3)
        b = detect(src, net, M=64, K=16, seed=3)
        assert a.keypoints.shape == (64, 3) and a.feature_maps.shape == (64, 16, 64)
        for name in ("keypoints", "sigmas", "weights", "feature_maps"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()

    def test_threaded_inference_matches_serial(self, small_pair):
        net = DetectorNet(8, [16, 16], [16, 1], np.random.default_rng(0))
        clusters = sample_clusters(small_pair[0], 64, 16, 2, 5)
        a = run_detector(net, clusters, threads=1)
        b = run_detector(net, clusters, threads=3)
        np.testing.assert_array_equal(a.keypoints.data, b.keypoints.data)
        np.testing.assert_array_equal(a.sigmas.data, b.sigmas.data)

    def test_select_keypoints_keeps_rows_aligned(self, small_pair):
        net = DetectorNet(8, [16, 16], [16, 1], np.random.default_rng(0))
        kps = detect(small_pair[0], net, M=32, K=8, seed=1)
        top = select_keypoints(kps, 10)
        order = np.argsort(kps.sigmas, kind="stable")[:10]
        np.testing.assert_array_equal(top.keypoints, kps.keypoints[order])
        np.testing.assert_array_equal(top.clusters.center_indices, kps.clusters.center_indices[order])
        assert isinstance(top, KeypointSet) and len(top) == 10
