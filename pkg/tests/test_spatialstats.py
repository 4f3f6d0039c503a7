import numpy as np
import pytest

from noiselur.spatialstats import (WeightMatrix, inverse_distance_weights,
                                   morans_i, permutation_test)


class TestWeights:
    def test_reciprocal_distances(self):
        w = inverse_distance_weights([(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)],
                                     row_standardize=False)
        assert w.weights[0, 1] == 1.0
        assert w.weights[0, 2] == 0.5
        assert w.weights[1, 2] == 1.0
        np.testing.assert_array_equal(np.diagonal(w.weights), 0.0)

    def test_row_standardized_sums(self):
        rng = np.random.default_rng(1)
        w = inverse_distance_weights(rng.uniform(0, 10, (20, 2)))
        np.testing.assert_allclose(w.weights.sum(axis=1), 1.0, atol=1e-12)

    def test_scaling_property(self):
        pts = np.array([(0.0, 0.0), (1.0, 2.0), (4.0, 1.0), (2.0, 5.0)])
        raw = inverse_distance_weights(pts, row_standardize=False)
        raw2 = inverse_distance_weights(pts * 2.0, row_standardize=False)
        np.testing.assert_allclose(raw2.weights, raw.weights / 2.0,
                                   atol=1e-15)
        std = inverse_distance_weights(pts)
        std2 = inverse_distance_weights(pts * 2.0)
        np.testing.assert_allclose(std2.weights, std.weights, atol=1e-15)

    def test_coincident_points_named(self):
        pts = [(0.0, 0.0), (1.0, 1.0), (1.0, 1.0), (2.0, 0.0)]
        with pytest.raises(ValueError, match="1 and 2"):
            inverse_distance_weights(pts)

    def test_power_two(self):
        w = inverse_distance_weights([(0.0, 0.0), (2.0, 0.0), (0.0, 3.0)],
                                     power=2, row_standardize=False)
        assert w.weights[0, 1] == 0.25
        assert w.weights[0, 2] == pytest.approx(1.0 / 9.0, abs=1e-15)

    def test_too_few_points(self):
        with pytest.raises(ValueError, match="at least 3"):
            inverse_distance_weights([(0.0, 0.0), (1.0, 0.0)])

    def test_nonzero_diagonal_rejected(self):
        w = np.ones((3, 3))
        with pytest.raises(ValueError, match="diagonal"):
            WeightMatrix(weights=w, power=1.0, row_standardized=False)


def _double_loop_i(values, w):
    v = np.asarray(values, dtype=np.float64)
    n = v.shape[0]
    z = v - v.mean()
    num = 0.0
    s0 = 0.0
    for i in range(n):
        for j in range(n):
            num += w[i, j] * z[i] * z[j]
            s0 += w[i, j]
    return n / s0 * num / float(z @ z)


class TestMoransI:
    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(2)
        for n in (5, 17, 50):
            pts = rng.uniform(0.0, 100.0, (n, 2))
            w = inverse_distance_weights(pts)
            v = rng.normal(0.0, 1.0, n)
            got = morans_i(v, w)
            want = _double_loop_i(v, w.weights)
            assert got == pytest.approx(want, abs=1e-12)

    def test_alternating_values_negative(self):
        pts = [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)]
        w = inverse_distance_weights(pts, power=2)
        assert morans_i([1.0, -1.0, 1.0, -1.0], w) < 0.0

    def test_gradient_positive(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(0.0, 10.0, (30, 2))
        w = inverse_distance_weights(pts)
        assert morans_i(pts[:, 0], w) > 0.0

    def test_affine_invariance(self):
        rng = np.random.default_rng(4)
        pts = rng.uniform(0.0, 10.0, (25, 2))
        w = inverse_distance_weights(pts)
        v = rng.normal(0.0, 2.0, 25)
        base = morans_i(v, w)
        assert morans_i(3.5 * v - 12.0, w) == pytest.approx(base, abs=1e-12)
        assert morans_i(-0.25 * v + 7.0, w) == pytest.approx(base, abs=1e-12)

    def test_constant_values_rejected(self):
        pts = [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]
        w = inverse_distance_weights(pts)
        with pytest.raises(ValueError, match="constant"):
            morans_i([5.0, 5.0, 5.0], w)

    def test_permutation_mean_near_expectation(self):
        rng = np.random.default_rng(5)
        n = 30
        pts = rng.uniform(0.0, 10.0, (n, 2))
        w = inverse_distance_weights(pts)
        v = rng.normal(0.0, 1.0, n)
        stats = [morans_i(v[rng.permutation(n)], w) for _ in range(800)]
        mean = float(np.mean(stats))
        se = float(np.std(stats) / np.sqrt(len(stats)))
        assert abs(mean - (-1.0 / (n - 1))) <= 3.0 * se


class TestPermutationTest:
    def test_gradient_hits_floor(self):
        rng = np.random.default_rng(6)
        pts = rng.uniform(0.0, 10.0, (60, 2))
        w = inverse_distance_weights(pts)
        res = permutation_test(pts[:, 0] + pts[:, 1], w, n_perm=199, seed=9)
        assert res["p_two_sided"] == 1.0 / 200.0
        assert res["p_one_sided"] == 1.0 / 200.0
        assert res["i"] > 0.0

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(7)
        pts = rng.uniform(0.0, 10.0, (25, 2))
        w = inverse_distance_weights(pts)
        v = rng.normal(0.0, 1.0, 25)
        a = permutation_test(v, w, n_perm=99, seed=42)
        b = permutation_test(v, w, n_perm=99, seed=42)
        assert a == b

    def test_p_in_valid_range(self):
        rng = np.random.default_rng(8)
        pts = rng.uniform(0.0, 10.0, (20, 2))
        w = inverse_distance_weights(pts)
        for trial in range(5):
            v = rng.normal(0.0, 1.0, 20)
            res = permutation_test(v, w, n_perm=99, seed=trial)
            assert 1.0 / 100.0 <= res["p_two_sided"] <= 1.0
            assert 1.0 / 100.0 <= res["p_one_sided"] <= 1.0

    def test_null_roughly_calibrated(self):
        # loose sanity band; the strict 200-dataset calibration runs in
        # the acceptance suite
        rng = np.random.default_rng(9)
        hits = 0
        trials = 60
        for t in range(trials):
            pts = rng.uniform(0.0, 10.0, (40, 2))
            w = inverse_distance_weights(pts)
            v = rng.normal(0.0, 1.0, 40)
            res = permutation_test(v, w, n_perm=199, seed=t)
            hits += res["p_two_sided"] < 0.05
        assert hits / trials <= 0.15
