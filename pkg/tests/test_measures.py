import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from haft.features import FeaturePool
from haft.measures import (DiscretizedColumn, column_entropy, discretize_target,
                           f1_score, mutual_info, one_minus_rae,
                           quantile_discretize, redundancy_id, relevance_iv,
                           top_k_select)


def naive_mi(codes_a, codes_b):
    """Independent reference: explicit loop over the joint histogram."""
    n = len(codes_a)
    total = 0.0
    for a in np.unique(codes_a):
        for b in np.unique(codes_b):
            p_ab = np.sum((codes_a == a) & (codes_b == b)) / n
            if p_ab == 0:
                continue
            p_a = np.sum(codes_a == a) / n
            p_b = np.sum(codes_b == b) / n
            total += p_ab * math.log(p_ab / (p_a * p_b))
    return max(total, 0.0)


def col(codes, n_bins=None):
    codes = np.asarray(codes, dtype=np.int64)
    return DiscretizedColumn(codes, n_bins or int(codes.max()) + 1)


class TestDiscretize:
    def test_median_split(self):
        out = quantile_discretize(np.array([1.0, 2.0, 3.0, 4.0]), 2)
        assert np.array_equal(out.codes, [0, 0, 1, 1])
        assert out.n_bins == 2

    def test_constant_collapses(self):
        out = quantile_discretize(np.full(20, 3.3), 4)
        assert out.n_bins == 1
        assert np.all(out.codes == 0)

    def test_class_labels_pass_through(self):
        y = np.array([0, 1, 1, 0, 1])
        out = discretize_target(y, "classification")
        assert np.array_equal(out.codes, y)

    def test_codes_in_range(self, rng):
        x = rng.standard_normal(200)
        out = quantile_discretize(x, 7)
        assert out.codes.min() >= 0
        assert out.codes.max() < out.n_bins

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            quantile_discretize(np.array([]))


class TestMutualInfo:
    def test_self_info_fair_coin(self):
        c = col(np.array([0, 1] * 50))
        assert abs(mutual_info(c, c) - math.log(2)) < 1e-9

    def test_independent_columns_near_zero(self):
        rng = np.random.default_rng(77)
        a = quantile_discretize(rng.random(10_000))
        b = quantile_discretize(rng.random(10_000))
        ours = mutual_info(a, b)
        reference = naive_mi(a.codes, b.codes)
        assert ours < 0.05
        assert abs(ours - reference) < 1e-12

    @given(st.integers(0, 500))
    def test_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a = col(rng.integers(0, 4, 80))
        b = col(rng.integers(0, 3, 80))
        assert abs(mutual_info(a, b) - mutual_info(b, a)) < 1e-12

    def test_self_info_is_entropy(self, rng):
        codes = col(rng.integers(0, 5, 300))
        probs = np.bincount(codes.codes) / 300
        h = -np.sum(probs[probs > 0] * np.log(probs[probs > 0]))
        assert abs(column_entropy(codes) - h) < 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mutual_info(col([0, 1]), col([0, 1, 0]))


class TestRedundancyRelevance:
    def test_single_feature_is_entropy(self, rng):
        x = rng.standard_normal(100)
        c = quantile_discretize(x)
        assert abs(redundancy_id([c]) - column_entropy(c)) < 1e-12

    def test_two_identical_features(self, rng):
        x = rng.standard_normal(100)
        c = quantile_discretize(x)
        assert abs(redundancy_id([c, c]) - column_entropy(c)) < 1e-12

    def test_matches_brute_force(self, rng):
        cols = [quantile_discretize(rng.standard_normal(150), 6) for _ in range(3)]
        brute = 0.0
        for a in cols:
            for b in cols:
                brute += naive_mi(a.codes, b.codes)
        brute /= len(cols) ** 2
        assert abs(redundancy_id(cols) - brute) < 1e-12

    def test_relevance_of_target_itself(self):
        y = col(np.array([0, 1] * 40))
        assert abs(relevance_iv([y], y) - math.log(2)) < 1e-12

    def test_relevance_independent_features(self):
        rng = np.random.default_rng(5)
        y = col(rng.integers(0, 2, 10_000))
        feats = [quantile_discretize(rng.random(10_000)) for _ in range(3)]
        assert relevance_iv(feats, y) < 0.05

    def test_singleton_equals_mi(self, rng):
        y = col(rng.integers(0, 3, 120))
        f = quantile_discretize(rng.standard_normal(120), 5)
        assert relevance_iv([f], y) == mutual_info(f, y)

    def test_empty_subset_rejected(self):
        with pytest.raises(ValueError):
            redundancy_id([])
        with pytest.raises(ValueError):
            relevance_iv([], col([0, 1]))


class TestTopK:
    def _pool(self, rng, y):
        cols = [rng.standard_normal(len(y)) for _ in range(4)]
        cols.insert(3, y.astype(float))  # feature 3 duplicates the target
        return FeaturePool.from_matrix(np.column_stack(cols))

    def test_all_returned_when_k_large(self, rng):
        y = rng.integers(0, 2, 80)
        pool = self._pool(rng, y)
        assert top_k_select(pool, discretize_target(y, "classification"), 20) \
            == sorted(top_k_select(pool, discretize_target(y, "classification"), 20),
                      key=lambda i: i == i)  # length check below
        assert len(top_k_select(pool, discretize_target(y, "classification"), 20)) == 5

    def test_target_duplicate_ranked_first(self, rng):
        y = rng.integers(0, 2, 200)
        pool = self._pool(rng, y)
        chosen = top_k_select(pool, discretize_target(y, "classification"), 2)
        assert chosen[0] == 3

    def test_tie_breaks_to_lower_index(self):
        y = np.array([0, 1] * 30)
        x = np.column_stack([y, np.zeros(60), y, np.ones(60)]).astype(float)
        pool = FeaturePool.from_matrix(x)
        chosen = top_k_select(pool, discretize_target(y, "classification"), 2)
        assert chosen == [0, 2]

    def test_zero_mi_padding_beyond_k_is_ignored(self, rng):
        y = rng.integers(0, 2, 100)
        base = np.column_stack([y.astype(float), y.astype(float) * 2 + rng.standard_normal(100) * 0.01,
                                rng.standard_normal(100)])
        pool = FeaturePool.from_matrix(base)
        codes = discretize_target(y, "classification")
        before = top_k_select(pool, codes, 2)
        constantish = np.repeat(rng.standard_normal(10), 10)
        pool.features.append(pool.features[0].__class__(
            values=constantish, name="pad", provenance={"var": "pad", "index": 9}))
        assert top_k_select(pool, codes, 2) == before

    def test_mrmr_runs(self, rng):
        y = rng.integers(0, 2, 100)
        pool = self._pool(rng, y)
        chosen = top_k_select(pool, discretize_target(y, "classification"), 3,
                              method="mrmr")
        assert len(chosen) == 3 and chosen[0] == 3


class TestMetrics:
    def test_perfect_f1(self):
        y = np.array([0, 1, 2, 1, 0])
        assert f1_score(y, y) == 1.0

    def test_equal_precision_recall(self):
        # both classes have P = R = 0.75
        y_true = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        y_pred = np.array([0, 0, 0, 1, 1, 1, 1, 0])
        assert abs(f1_score(y_true, y_pred) - 0.75) < 1e-12

    def test_constant_prediction_macro_third(self):
        y_true = np.array([0] * 10 + [1] * 10)
        y_pred = np.zeros(20, dtype=int)
        assert abs(f1_score(y_true, y_pred) - 1.0 / 3.0) < 1e-12

    @given(st.integers(0, 300))
    def test_f1_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        y_true = rng.integers(0, 3, 40)
        y_pred = rng.integers(0, 3, 40)
        perm = rng.permutation(40)
        assert f1_score(y_true, y_pred) == f1_score(y_true[perm], y_pred[perm])

    def test_rae_perfect(self):
        y = np.array([1.0, 2.0, 5.0])
        assert one_minus_rae(y, y) == 1.0

    def test_rae_mean_predictor(self):
        y = np.array([1.0, 2.0, 3.0, 6.0])
        pred = np.full(4, y.mean())
        assert abs(one_minus_rae(y, pred)) < 1e-12

    def test_rae_hand_example(self):
        assert one_minus_rae(np.array([0.0, 2.0]), np.array([1.0, 1.0])) == 0.0

    @given(st.integers(0, 300))
    def test_rae_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.standard_normal(30)
        pred = rng.standard_normal(30)
        perm = rng.permutation(30)
        a = one_minus_rae(y, pred)
        b = one_minus_rae(y[perm], pred[perm])
        assert abs(a - b) < 1e-12

    def test_rae_constant_target_rejected(self):
        with pytest.raises(ValueError):
            one_minus_rae(np.ones(5), np.zeros(5))
