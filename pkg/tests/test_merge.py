import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone
from sklearn.pipeline import make_pipeline

from oracles import naive_dpc_knn
from tofc.errors import InvalidArgumentError
from tofc.merge import (
    FeatureMerger,
    local_density,
    merge,
    merge_patch,
    pairwise_sq_dists,
    select_centers,
    separation,
)

SIX = np.array([[0.0], [0.1], [0.2], [5.0], [5.1], [5.2]])


def patches(max_n_v=24, max_d_v=6):
    return st.tuples(st.integers(2, max_n_v), st.integers(1, max_d_v)).flatmap(
        lambda s: arrays(np.float64, s, elements=st.floats(-10, 10, allow_nan=False, width=32))
    )


class TestLocalDensity:
    def test_identical_features(self):
        assert np.all(local_density(np.ones((6, 3)), 3) == 1.0)

    def test_three_points(self):
        rho = local_density(np.array([[0.0], [0.1], [0.2]]), 2)
        np.testing.assert_allclose(rho, [math.exp(-0.025), math.exp(-0.01), math.exp(-0.025)], rtol=1e-12)

    def test_matches_brute_force(self):
        x = np.random.default_rng(0).normal(size=(16, 4))
        _, _, _, rho, _ = naive_dpc_knn(x, 1, 3)
        np.testing.assert_allclose(local_density(x, 3), rho, rtol=1e-12)

    @pytest.mark.parametrize("k", [0, 6])
    def test_k_out_of_range(self, k):
        with pytest.raises(InvalidArgumentError):
            local_density(np.zeros((6, 2)), k)

    @settings(max_examples=60, deadline=None)
    @given(patches(), st.floats(0.05, 0.99))
    def test_shrinking_never_lowers_density(self, x, s):
        k = min(3, x.shape[0] - 1)
        assert np.all(local_density(x * s, k) >= local_density(x, k) - 1e-15)

    @settings(max_examples=60, deadline=None)
    @given(patches())
    def test_density_in_unit_interval(self, x):
        rho = local_density(x, 1)
        assert np.all((rho >= 0) & (rho <= 1))


class TestSeparation:
    def test_identical_features_take_max_branch(self):
        x = np.ones((5, 2))
        assert np.all(separation(x, local_density(x, 2)) == 0.0)

    def test_six_points(self):
        rho = local_density(SIX, 2)
        delta = separation(SIX, rho)
        assert math.isclose(delta[0], 0.1, rel_tol=1e-9)
        # 0.1 and 5.1 tie on density up to rounding: whichever is not strictly
        # denser takes the max branch, the other measures the gap to its peer
        assert math.isclose(rho[1], rho[4], rel_tol=1e-12)
        assert sorted(round(float(d), 9) for d in delta[[1, 4]]) in ([5.0, 5.1], [5.1, 5.1])

    def test_matches_brute_force(self):
        x = np.random.default_rng(1).normal(size=(16, 4))
        _, _, _, rho, delta = naive_dpc_knn(x, 1, 3)
        np.testing.assert_allclose(separation(x, local_density(x, 3)), delta, rtol=1e-12)

    def test_rho_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            separation(np.zeros((4, 2)), np.zeros(3))


class TestCenters:
    def test_all_selected(self):
        assert sorted(select_centers(np.ones(5), np.arange(5.0), 5)) == [0, 1, 2, 3, 4]

    def test_ties_prefer_lower_index(self):
        assert select_centers(np.ones(4), np.array([1.0, 2.0, 2.0, 0.5]), 2).tolist() == [1, 2]

    def test_six_points(self):
        rho = local_density(SIX, 2)
        centers = select_centers(rho, separation(SIX, rho), 2)
        assert sorted(centers.tolist()) == [1, 4]

    def test_random_matches_argsort(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            rho, delta = rng.random(20), rng.random(20)
            n_c = int(rng.integers(1, 21))
            score = rho * delta
            expected = sorted(range(20), key=lambda i: (-score[i], i))[:n_c]
            assert select_centers(rho, delta, n_c).tolist() == expected

    @pytest.mark.parametrize("n_c", [0, 6])
    def test_n_c_out_of_range(self, n_c):
        with pytest.raises(InvalidArgumentError):
            select_centers(np.ones(5), np.ones(5), n_c)


class TestMergePatch:
    def test_singletons(self):
        x = np.random.default_rng(2).normal(size=(7, 3))
        order = np.array([3, 0, 6, 1, 5, 2, 4])
        merged, labels = merge_patch(x, order)
        np.testing.assert_array_equal(merged, x[order])
        assert labels[order].tolist() == list(range(7))

    def test_six_points(self):
        merged, labels = merge_patch(SIX, np.array([1, 4]))
        np.testing.assert_allclose(merged.ravel(), [0.1, 5.1], rtol=1e-12)
        assert labels.tolist() == [0, 0, 0, 1, 1, 1]

    def test_labels_are_nearest_centers(self):
        x = np.random.default_rng(3).normal(size=(30, 5))
        centers = np.array([4, 17, 9, 22])
        _, labels = merge_patch(x, centers)
        for i in range(30):
            d = [np.sum((x[i] - x[c]) ** 2) for c in centers]
            assert d[labels[i]] == min(d)


class TestMerge:
    @pytest.mark.parametrize("n_c, n_v, ratio", [(8, 729, 8 / 729), (32, 729, 32 / 729), (64, 576, 64 / 576)])
    def test_token_ratio(self, n_c, n_v, ratio):
        x = np.random.default_rng(0).normal(size=(1, n_v, 2))
        assert merge(x, n_c).token_ratio == ratio

    def test_shape_errors(self):
        with pytest.raises(InvalidArgumentError):
            merge(np.zeros((4, 3)), 2)
        with pytest.raises(InvalidArgumentError):
            merge(np.zeros((1, 4, 3)), 5)

    def test_duplicates_give_zero_distance(self):
        x = np.tile(np.random.default_rng(4).normal(size=(1, 50)) * 1e3, (3, 1))
        assert np.all(pairwise_sq_dists(x) == 0.0)

    def test_distances_symmetric(self):
        x = np.random.default_rng(6).normal(size=(40, 7))
        d2 = pairwise_sq_dists(x)
        assert np.array_equal(d2, d2.T)

    @settings(max_examples=80, deadline=None)
    @given(patches(), st.integers(1, 5), st.integers(1, 8))
    def test_partition_and_means(self, x, k, n_c):
        n_v = x.shape[0]
        k, n_c = min(k, n_v - 1), min(n_c, n_v)
        out = merge(x[None], n_c, k)
        labels = out.assignment.labels[0]
        centers = out.assignment.centers[0]
        assert len(set(centers.tolist())) == n_c
        assert labels[centers].tolist() == list(range(n_c))
        assert set(labels.tolist()) == set(range(n_c))
        for c in range(n_c):
            members = x[labels == c]
            expected = [math.fsum(col) / len(members) for col in members.T]
            np.testing.assert_allclose(out.data[0, c], expected, rtol=1e-6, atol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(patches())
    def test_deterministic(self, x):
        a = merge(x[None], min(3, x.shape[0]), 1)
        b = merge(x[None].copy(), min(3, x.shape[0]), 1)
        assert a.data.tobytes() == b.data.tobytes()
        assert np.array_equal(a.assignment.labels, b.assignment.labels)


class TestFeatureMerger:
    def test_pipeline(self):
        x = np.random.default_rng(0).normal(size=(3, 20, 4))
        pipe = make_pipeline(FeatureMerger(n_c=5, k=3))
        out = pipe.fit_transform(x)
        assert out.shape == (3, 5, 4)
        np.testing.assert_array_equal(out, merge(x, 5, 3).data)

    def test_params_and_clone(self):
        m = FeatureMerger(n_c=7, k=2)
        assert m.get_params() == {"n_c": 7, "k": 2}
        assert clone(m).get_params() == m.get_params()

    def test_token_ratio_after_fit(self):
        m = FeatureMerger(n_c=8).fit(np.zeros((1, 729, 2)))
        assert m.token_ratio_ == 8 / 729

    def test_validation(self):
        with pytest.raises(InvalidArgumentError):
            FeatureMerger(n_c=30).fit(np.zeros((1, 20, 2)))
        m = FeatureMerger(n_c=2).fit(np.zeros((1, 20, 2)))
        with pytest.raises(InvalidArgumentError):
            m.transform(np.zeros((1, 20, 3)))
