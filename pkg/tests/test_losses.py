import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rskdd import nn
from rskdd.geometry import RigidTransform
from rskdd.losses import (DIST_EPS, MatchingConfig, PairBatch, descriptor_sqdist, keypoint_weights,
                          matching_loss, point_to_point_loss, probabilistic_chamfer_loss, soft_assign)
from gradcheck import MAX_REL_ERR, max_rel_error

T = RigidTransform.from_axis_angle([0.0, 0.0, 1.0], 0.4, [1.0, 2.0, -0.5])


def batch(xs, ss, qs, xt, st_, qt, gt=T):
    t = lambda a: nn.as_tensor(np.asarray(a, dtype=np.float64))
    return PairBatch(t(xs), t(ss), t(qs), t(xt), t(st_), t(qt), gt)


class TestSoftAssignment:
    def test_symmetric_two_point_case(self):
        q = np.array([[0.0, 0.0]])
        targets = np.array([[1.0, 0.0], [-1.0, 0.0]])
        kp = np.array([[0.0, 0.0, 0.0], [2.0, 4.0, 6.0]])
        s, xhat = soft_assign(q, targets, kp, 0.1)
        np.testing.assert_allclose(s.data, [[0.5, 0.5]], atol=1e-15)
        np.testing.assert_allclose(xhat.data, [[1.0, 2.0, 3.0]], atol=1e-15)

    def test_default_temperature(self):
        assert MatchingConfig().temperature == 0.1

    def test_rows_on_simplex(self, rng):
        s, _ = soft_assign(rng.normal(size=(20, 8)), rng.normal(size=(30, 8)), rng.normal(size=(30, 3)), 0.1)
        assert np.all(s.data >= 0)
        np.testing.assert_allclose(s.data.sum(axis=1), 1.0, atol=1e-9)

    def test_sqdist_matches_loop(self, rng):
        a, b = rng.normal(size=(6, 4)), rng.normal(size=(5, 4))
        d = descriptor_sqdist(a, b).data
        for i, j in itertools.product(range(6), range(5)):
            assert d[i, j] == pytest.approx(np.sum((a[i] - b[j]) ** 2), rel=1e-12)

    def test_zero_distance_is_clamped(self):
        q = np.array([[1.0, 2.0], [3.0, 4.0]])
        s, _ = soft_assign(q, q, np.eye(2, 3), 0.1)
        assert np.all(np.isfinite(s.data))
        np.testing.assert_allclose(s.data, np.eye(2), atol=1e-12)
        assert DIST_EPS == 1e-12

    def test_argmax_is_descriptor_nearest_at_any_temperature(self, rng):
        q, p = rng.normal(size=(64, 16)), rng.normal(size=(64, 16))
        nearest = np.argmin(((q[:, None] - p[None]) ** 2).sum(-1), axis=1)
        for t in (1e-3, 0.1, 10.0):
            s, _ = soft_assign(q, p, np.zeros((64, 3)), t)
            np.testing.assert_array_equal(np.argmax(s.data, axis=1), nearest)

    def test_soft_correspondence_approaches_nearest_as_temperature_falls(self, rng):
        q, p = rng.normal(size=(64, 16)), rng.normal(size=(64, 16))
        kp = rng.uniform(-20, 20, size=(64, 3))
        nearest = np.argmin(((q[:, None] - p[None]) ** 2).sum(-1), axis=1)
        devs = [np.linalg.norm(soft_assign(q, p, kp, t)[1].data - kp[nearest], axis=1).mean()
                for t in (1.0, 1e-2, 1e-4, 1e-6, 1e-8)]
        assert all(b <= a + 1e-12 for a, b in zip(devs, devs[1:]))
        assert devs[-1] < 1e-3

    def test_separated_descriptors_degenerate_at_low_temperature(self, rng):
        # each target is a slightly perturbed copy of one source descriptor
        q = rng.normal(size=(64, 16))
        perm = rng.permutation(64)
        p = q[perm] + rng.normal(scale=1e-2, size=(64, 16))
        kp = rng.uniform(-20, 20, size=(64, 3))
        s, xhat = soft_assign(q, p, kp, 1e-3)
        match = np.argsort(perm)
        np.testing.assert_array_equal(np.argmax(s.data, axis=1), match)
        assert np.max(np.linalg.norm(xhat.data - kp[match], axis=1)) < 1e-3

    @given(st.integers(0, 2**32 - 1))
    def test_entropy_nondecreasing_in_temperature(self, seed):
        r = np.random.default_rng(seed)
        q, p = r.normal(size=(4, 6)), r.normal(size=(9, 6))

        def entropy(t):
            s = soft_assign(q, p, np.zeros((9, 3)), t)[0].data
            return -(s * np.log(np.maximum(s, 1e-300))).sum(axis=1)
        ents = [entropy(t) for t in (0.01, 0.05, 0.1, 0.5, 1.0, 5.0)]
        for lo, hi in zip(ents, ents[1:]):
            assert np.all(hi >= lo - 1e-9)

    def test_rejects_nonpositive_temperature(self):
        with pytest.raises(ValueError):
            soft_assign(np.ones((1, 2)), np.ones((1, 2)), np.ones((1, 3)), 0.0)

    def test_gradients(self, rng):
        kp = rng.normal(size=(5, 3))
        coef = rng.normal(size=(4, 3))
        f = lambda q, p, k: nn.sum_(soft_assign(q, p, k, 0.5)[1] * coef)
        assert max_rel_error(f, rng.normal(size=(4, 3)), rng.normal(size=(5, 3)), kp) < MAX_REL_ERR


class TestKeypointWeights:
    def test_example(self):
        np.testing.assert_allclose(keypoint_weights(np.array([0.5, 1.5]), 1.0).data, [2.0, 0.0])

    def test_equal_sigmas_give_ones(self):
        np.testing.assert_allclose(keypoint_weights(np.full(7, 0.3), 1.0).data, 1.0, atol=1e-15)

    @given(st.lists(st.floats(0.0, 2.0), min_size=1, max_size=50))
    def test_sum_equals_count(self, sig):
        sig = np.array(sig)
        if np.all(sig >= 1.0):
            return
        w = keypoint_weights(sig, 1.0).data
        assert w.sum() == pytest.approx(len(sig), rel=1e-12) and np.all(w >= 0)

    def test_all_above_max_falls_back_to_uniform(self, caplog):
        with caplog.at_level(logging.WARNING):
            w = keypoint_weights(np.array([1.2, 3.0]), 1.0).data
        np.testing.assert_array_equal(w, [1.0, 1.0])
        assert "uniform" in caplog.text

    def test_gradients(self, rng):
        c = rng.normal(size=6)
        sig = rng.uniform(0.1, 0.9, size=6)
        assert max_rel_error(lambda s: nn.sum_(keypoint_weights(s, 1.0) * c), sig) < MAX_REL_ERR


class TestMatchingLoss:
    def test_perfect_correspondence_is_zero(self, rng):
        xs = rng.normal(size=(10, 3)) * 5
        q = np.eye(10) * 10
        b = batch(xs, np.full(10, 0.2), q, T.apply(xs), np.full(10, 0.2), q)
        assert float(matching_loss(b, MatchingConfig()).data) == pytest.approx(0.0, abs=1e-9)

    def test_nonnegative_and_direct_value(self, rng):
        xs, xt = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        qs, qt = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        ss, stt = rng.uniform(0.1, 0.9, 4), rng.uniform(0.1, 0.9, 4)
        got = float(matching_loss(batch(xs, ss, qs, xt, stt, qt), MatchingConfig(0.5)).data)

        def oracle_dir(qa, qb, xb, sa):
            d = ((qa[:, None] - qb[None]) ** 2).sum(-1)
            z = (1 / d) / 0.5
            s = np.exp(z - z.max(1, keepdims=True))
            s /= s.sum(1, keepdims=True)
            w = np.maximum(1 - sa, 0)
            return s @ xb, w * len(w) / w.sum()
        xh_s, ws = oracle_dir(qs, qt, xt, ss)
        xh_t, wt = oracle_dir(qt, qs, xs, stt)
        expect = (ws * ((T.apply(xs) - xh_s) ** 2).sum(1)).sum() + (wt * ((T.apply(xh_t) - xt) ** 2).sum(1)).sum()
        assert got == pytest.approx(expect, rel=1e-12) and got >= 0

    def test_weights_toggle(self, rng):
        xs, xt = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        qs, qt = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        b = batch(xs, np.array([0.1, 0.2, 0.9, 0.95]), qs, xt, np.full(4, 0.5), qt)
        on = float(matching_loss(b, MatchingConfig(use_weights=True)).data)
        off = float(matching_loss(b, MatchingConfig(use_weights=False)).data)
        assert on != off

    def test_gradients_all_inputs(self, rng):
        xs, xt = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        qs, qt = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        ss, stt = rng.uniform(0.1, 0.9, 4), rng.uniform(0.1, 0.9, 4)
        f = lambda *a: matching_loss(PairBatch(*a, gt=T), MatchingConfig(0.5))
        assert max_rel_error(f, xs, ss, qs, xt, stt, qt) < MAX_REL_ERR

    def test_permutation_argmin_survives_sigma_shift(self, rng):
        xs = rng.normal(size=(3, 3)) * 3
        xt = T.apply(xs)
        qs = rng.normal(size=(3, 4))
        base = np.array([0.1, 0.3, 0.2])

        def best(shift):
            losses = []
            for perm in itertools.permutations(range(3)):
                b = batch(xs, base + shift, qs, xt, base + shift, qs[list(perm)])
                losses.append(float(matching_loss(b, MatchingConfig(0.1)).data))
            return int(np.argmin(losses))
        assert best(0.0) == best(0.5) == 0

    def test_mismatched_counts(self):
        with pytest.raises(ValueError):
            batch(np.zeros((2, 3)), np.ones(2), np.zeros((2, 2)), np.zeros((3, 3)), np.ones(3), np.zeros((3, 2)))


class TestChamfer:
    def test_identical_sets_unit_sigma_is_zero(self, rng):
        x = rng.normal(size=(8, 3))
        b = batch(x, np.ones(8), np.zeros((8, 1)), x, np.ones(8), np.zeros((8, 1)), RigidTransform.identity())
        assert float(probabilistic_chamfer_loss(b).data) == pytest.approx(0.0, abs=1e-12)

    def test_direct_value(self):
        xs = np.array([[0.0, 0, 0], [10.0, 0, 0]])
        xt = np.array([[0.0, 3, 0], [10.0, 0, 4]])
        ss, stt = np.array([1.0, 2.0]), np.array([3.0, 2.0])
        b = batch(xs, ss, np.zeros((2, 1)), xt, stt, np.zeros((2, 1)), RigidTransform.identity())
        one_dir = (np.log(2.0) + 3 / 2.0 + np.log(2.0) + 4 / 2.0) / 2
        assert float(probabilistic_chamfer_loss(b).data) == pytest.approx(2 * one_dir, rel=1e-12)

    def test_sigma_minimiser_is_distance(self):
        d = 1.7
        xs, xt = np.zeros((1, 3)), np.array([[d, 0.0, 0.0]])
        sigma = nn.Tensor(np.array([0.3]), requires_grad=True)
        opt = nn.SGD([sigma], lr=0.05, momentum=0.5)
        for _ in range(2000):
            opt.zero_grad()
            b = PairBatch(nn.Tensor(xs), sigma, nn.Tensor(np.zeros((1, 1))), nn.Tensor(xt), sigma,
                          nn.Tensor(np.zeros((1, 1))), RigidTransform.identity())
            nn.backward(probabilistic_chamfer_loss(b))
            opt.step()
        assert abs(sigma.data[0] - d) / d < 0.01

    def test_monotone_in_separation(self, rng):
        xs = rng.normal(size=(6, 3))
        vals = []
        for shift in (0.0, 0.5, 1.0, 2.0, 4.0):
            b = batch(xs, np.full(6, 0.5), np.zeros((6, 1)), T.apply(xs) + [shift, 0, 0], np.full(6, 0.5),
                      np.zeros((6, 1)))
            vals.append(float(probabilistic_chamfer_loss(b).data))
        assert all(b > a for a, b in zip(vals, vals[1:]))

    def test_gradients(self, rng):
        xs, xt = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        f = lambda xs, ss, xt, stt: probabilistic_chamfer_loss(
            PairBatch(xs, ss, nn.Tensor(np.zeros((5, 1))), xt, stt, nn.Tensor(np.zeros((5, 1))), T))
        assert max_rel_error(f, xs, rng.uniform(0.5, 1.5, 5), xt, rng.uniform(0.5, 1.5, 5)) < MAX_REL_ERR


class TestPointToPoint:
    def test_on_cloud_is_zero(self, rng):
        pts = rng.normal(size=(50, 3))
        assert float(point_to_point_loss(pts[:10], pts).data) == 0.0

    def test_two_metres_gives_four(self):
        assert float(point_to_point_loss(np.array([[2.0, 0, 0]]), np.zeros((1, 3))).data) == pytest.approx(4.0)

    def test_empty_cloud(self):
        with pytest.raises(ValueError):
            point_to_point_loss(np.zeros((1, 3)), np.zeros((0, 3)))

    def test_gradients(self, rng):
        pts = rng.normal(size=(40, 3)) * 4
        assert max_rel_error(lambda k: point_to_point_loss(k, pts), rng.normal(size=(6, 3))) < MAX_REL_ERR
