import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nacnet.errors import EpipoleCoincidence, RankDeficient
from nacnet.geometry import essential_from_pose
from nacnet.triangulation import (
    label_by_otm,
    otm_correct,
    otm_correct_batch,
    triangulate_point,
)
from helpers import exact_pairs, random_pose, rng_for
from oracles import sweep_min_cost


def random_instance(rng):
    r, t = random_pose(rng)
    e = essential_from_pose(r, t)
    p = rng.uniform(-1, 1, 2)
    pt = rng.uniform(-1, 1, 2)
    return e, p, pt


class TestOtmCorrect:
    def test_satisfying_pair_unchanged(self):
        rng = rng_for(200)
        r, t = random_pose(rng)
        e = essential_from_pose(r, t)
        rows = exact_pairs(r, t, 5, rng)
        for row in rows:
            corrected = otm_correct(e, row[:2], row[2:])
            assert corrected.cost < 1e-12
            np.testing.assert_allclose(corrected.q, row[:2], atol=1e-7)
            np.testing.assert_allclose(corrected.q_t, row[2:], atol=1e-7)

    def test_constraint_satisfied_on_output(self):
        rng = rng_for(201)
        for _ in range(100):
            e, p, pt = random_instance(rng)
            corrected = otm_correct(e, p, pt)
            qh = np.array([corrected.q[0], corrected.q[1], 1.0])
            qth = np.array([corrected.q_t[0], corrected.q_t[1], 1.0])
            assert abs(qth @ e @ qh) < 1e-9

    def test_cost_is_squared_displacement(self):
        rng = rng_for(202)
        e, p, pt = random_instance(rng)
        c = otm_correct(e, p, pt)
        direct = float(np.sum((c.q - p) ** 2) + np.sum((c.q_t - pt) ** 2))
        assert c.cost == pytest.approx(direct, abs=1e-12)

    def test_not_beaten_by_pencil_sweep(self):
        rng = rng_for(203)
        for _ in range(150):
            e, p, pt = random_instance(rng)
            cost = otm_correct(e, p, pt).cost
            assert cost <= sweep_min_cost(e, p, pt, samples=100_000) + 1e-8

    def test_idempotent(self):
        rng = rng_for(204)
        for _ in range(20):
            e, p, pt = random_instance(rng)
            first = otm_correct(e, p, pt)
            second = otm_correct(e, first.q, first.q_t)
            assert second.cost < 1e-12
            np.testing.assert_allclose(second.q, first.q, atol=1e-7)
            np.testing.assert_allclose(second.q_t, first.q_t, atol=1e-7)

    def test_epipole_coincidence(self):
        r = np.eye(3)
        t = np.array([0.0, 0.0, 1.0])
        e = essential_from_pose(r, t)
        # Epipole of a forward motion sits at the image center in both views.
        with pytest.raises(EpipoleCoincidence):
            otm_correct(e, np.zeros(2), np.array([0.4, 0.2]))

    def test_batch_matches_single(self):
        rng = rng_for(205)
        r, t = random_pose(rng)
        e = essential_from_pose(r, t)
        pairs = rng.uniform(-1, 1, (64, 4))
        q, qt, cost, status = otm_correct_batch(e, pairs)
        assert np.all(status == 0)
        for i in range(0, 64, 7):
            single = otm_correct(e, pairs[i, :2], pairs[i, 2:])
            assert cost[i] == pytest.approx(single.cost, rel=1e-10, abs=1e-14)
            np.testing.assert_allclose(q[i], single.q, atol=1e-12)
            np.testing.assert_allclose(qt[i], single.q_t, atol=1e-12)


class TestLabelByOtm:
    def test_exact_pairs_all_inliers(self):
        rng = rng_for(210)
        r, t = random_pose(rng)
        e = essential_from_pose(r, t)
        rows = exact_pairs(r, t, 40, rng)
        assert label_by_otm(e, rows, tau=3e-3).all()

    def test_zero_tau_all_outliers(self):
        rng = rng_for(211)
        r, t = random_pose(rng)
        e = essential_from_pose(r, t)
        rows = exact_pairs(r, t, 10, rng)
        assert not label_by_otm(e, rows, tau=0.0).any()

    def test_matches_sweep_oracle_labeler(self):
        rng = rng_for(212)
        r, t = random_pose(rng)
        e = essential_from_pose(r, t)
        pairs = rng.uniform(-1, 1, (100, 4))
        labels = label_by_otm(e, pairs, tau=3e-3)
        oracle = np.array([
            np.sqrt(sweep_min_cost(e, row[:2], row[2:], samples=200_000)) < 3e-3
            for row in pairs
        ], dtype=np.uint8)
        np.testing.assert_array_equal(labels, oracle)

    @settings(max_examples=25, deadline=None)
    @given(scale=st.floats(1e-4, 1e4), seed=st.integers(0, 2**31 - 1))
    def test_scale_invariance(self, scale, seed):
        rng = rng_for(seed)
        r, t = random_pose(rng)
        e = essential_from_pose(r, t)
        pairs = np.concatenate([exact_pairs(r, t, 8, rng), rng.uniform(-1, 1, (8, 4))])
        np.testing.assert_array_equal(
            label_by_otm(e, pairs), label_by_otm(scale * e, pairs)
        )

    def test_degenerate_rows_labeled_zero_and_counted(self):
        e = essential_from_pose(np.eye(3), np.array([0.0, 0.0, 1.0]))
        pairs = np.array([[0.0, 0.0, 0.4, 0.2], [0.3, 0.1, 0.28, 0.12]])
        labels, failed = label_by_otm(e, pairs, return_diagnostics=True)
        assert labels[0] == 0
        assert failed == 1


class TestTriangulatePoint:
    def test_exact_recovery(self):
        r = np.eye(3)
        t = np.array([1.0, 0.0, 0.0])
        x = np.array([0.0, 0.0, 5.0])
        q = x[:2] / x[2]
        x2 = r @ x + t
        qt = x2[:2] / x2[2]
        point, (ok1, ok2) = triangulate_point(r, t, q, qt)
        np.testing.assert_allclose(point, x, atol=1e-12)
        assert ok1 and ok2

    def test_point_behind_first_camera(self):
        r = np.eye(3)
        t = np.array([1.0, 0.0, 0.0])
        x = np.array([0.1, 0.0, -5.0])
        q = x[:2] / x[2]
        x2 = r @ x + t
        qt = x2[:2] / x2[2]
        _, (ok1, _) = triangulate_point(r, t, q, qt)
        assert not ok1

    def test_reprojection_error(self):
        rng = rng_for(220)
        for _ in range(100):
            r, t = random_pose(rng)
            row = exact_pairs(r, t, 1, rng)[0]
            point, (ok1, ok2) = triangulate_point(r, t, row[:2], row[2:])
            assert ok1 and ok2
            p1 = point[:2] / point[2]
            x2 = r @ point + t
            p2 = x2[:2] / x2[2]
            assert np.abs(np.concatenate([p1 - row[:2], p2 - row[2:]])).max() < 1e-9

    def test_rank_deficient_for_collinear_rays(self):
        with pytest.raises(RankDeficient):
            triangulate_point(np.eye(3), np.array([0.0, 0.0, 1.0]), np.zeros(2), np.zeros(2))
