import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mmaux import metrics
from mmaux.errors import DegenerateTestError, InputError
from mmaux.synthdata import ALL_RELATIONS


def f1_oracle(preds, golds, k):
    """Per-class precision/recall/F1 by counting, weighted by gold support."""
    total = 0.0
    for c in range(k):
        tp = sum(1 for p, g in zip(preds, golds) if p == c and g == c)
        fp = sum(1 for p, g in zip(preds, golds) if p == c and g != c)
        fn = sum(1 for p, g in zip(preds, golds) if p != c and g == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        total += f1 * (tp + fn)
    return total / len(golds)


class TestWeightedF1:
    def test_perfect(self):
        assert metrics.weighted_f1([0, 1, 2, 1], [0, 1, 2, 1]) == 1.0

    def test_all_wrong(self):
        assert metrics.weighted_f1([1, 0], [0, 1]) == 0.0

    def test_hand_case(self):
        # class 0: P=1, R=0.5, F1=2/3 ; class 1: P=2/3, R=1, F1=0.8 ; support 2 each
        assert metrics.weighted_f1([0, 1, 1, 1], [0, 0, 1, 1]) == pytest.approx(11 / 15, abs=1e-12)

    def test_against_bruteforce(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            k = int(rng.integers(2, 5))
            n = int(rng.integers(1, 40))
            g = rng.integers(0, k, n)
            p = rng.integers(0, k, n)
            assert metrics.weighted_f1(p, g, k) == pytest.approx(f1_oracle(p.tolist(), g.tolist(), k), abs=1e-12)

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=30), st.permutations(range(4)))
    def test_relabeling_invariance(self, pairs, perm):
        p = np.array([a for a, _ in pairs])
        g = np.array([b for _, b in pairs])
        m = np.array(perm)
        assert metrics.weighted_f1(m[p], m[g], 4) == pytest.approx(metrics.weighted_f1(p, g, 4), abs=1e-12)

    def test_per_class_and_confusion(self):
        cm = metrics.confusion_matrix([0, 1, 1, 1], [0, 0, 1, 1])
        np.testing.assert_array_equal(cm.counts, [[1, 1], [0, 2]])
        np.testing.assert_allclose(metrics.per_class_f1([0, 1, 1, 1], [0, 0, 1, 1]), [2 / 3, 0.8])

    def test_errors(self):
        with pytest.raises(InputError):
            metrics.weighted_f1([0, 1], [0])
        with pytest.raises(InputError):
            metrics.weighted_f1([], [])


class TestRelationBreakdown:
    def test_accuracy_per_relation(self):
        tt, tf, ft, ff = ALL_RELATIONS
        rb = metrics.accuracy_by_relation([0, 1, 1, 0, 1], [0, 1, 0, 0, 0], [tt, tt, tf, ff, ff])
        assert rb.accuracy[tt] == 1.0
        assert rb.accuracy[tf] == 0.0
        assert rb.accuracy[ff] == 0.5
        assert ft not in rb.accuracy
        assert rb.support[ff] == 2
        assert rb.overall_accuracy() == pytest.approx(3 / 5)
        assert rb.to_json()[ff.key] == {"accuracy": 0.5, "support": 2}


class TestAggregate:
    def test_three_seeds(self):
        mean, std = metrics.aggregate([0.731, 0.746, 0.735])
        assert mean == pytest.approx(0.7373333, abs=1e-6)
        assert std == pytest.approx(np.std([0.731, 0.746, 0.735], ddof=1), abs=1e-15)
        assert std == pytest.approx(0.0078, abs=1e-4)

    def test_single_value(self):
        assert metrics.aggregate([0.5]) == (0.5, 0.0)

    def test_identical_values(self):
        assert metrics.aggregate([0.8, 0.8, 0.8]) == (0.8, 0.0)


class TestWelch:
    @pytest.mark.parametrize(
        "a,b",
        [
            ([1, 2, 3, 4, 5], [2, 3, 4, 5, 6]),
            ([0.70, 0.72, 0.71], [0.74, 0.75, 0.76]),
            ([0.5, 0.9, 0.1, 0.4], [0.3, 0.31]),
            ([10.0, 12.0, 9.5, 11.2, 10.7, 9.9], [10.1, 10.3, 10.2]),
        ],
    )
    def test_matches_reference(self, a, b):
        ref = stats.ttest_ind(a, b, equal_var=False)
        t, df, p = metrics.welch_t_test(a, b)
        assert t == pytest.approx(ref.statistic, rel=1e-10)
        assert p == pytest.approx(ref.pvalue, rel=1e-8, abs=1e-12)
        va, vb = np.var(a, ddof=1) / len(a), np.var(b, ddof=1) / len(b)
        assert df == pytest.approx((va + vb) ** 2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1)), rel=1e-12)

    def test_frozen_values(self):
        r = metrics.welch_t_test([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])
        assert (r.t, r.df) == (pytest.approx(-1.0), pytest.approx(8.0))
        assert r.p == pytest.approx(0.34659350708733416, abs=1e-10)
        r2 = metrics.welch_t_test([0.70, 0.72, 0.71], [0.74, 0.75, 0.76])
        assert r2.p == pytest.approx(0.00804989310083772, abs=1e-10)

    def test_random_against_reference(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a = rng.normal(0, rng.uniform(0.1, 2), int(rng.integers(2, 8)))
            b = rng.normal(rng.uniform(-1, 1), rng.uniform(0.1, 2), int(rng.integers(2, 8)))
            assert metrics.welch_t_test(a, b).p == pytest.approx(stats.ttest_ind(a, b, equal_var=False).pvalue, rel=1e-7, abs=1e-12)

    def test_antisymmetric(self):
        a, b = [0.1, 0.4, 0.3], [0.6, 0.2, 0.9, 0.7]
        r1, r2 = metrics.welch_t_test(a, b), metrics.welch_t_test(b, a)
        assert r1.t == pytest.approx(-r2.t)
        assert r1.p == pytest.approx(r2.p)

    def test_shift_invariant(self):
        a, b = np.array([0.1, 0.4, 0.3]), np.array([0.6, 0.2, 0.9, 0.7])
        assert metrics.welch_t_test(a + 3.0, b + 3.0).p == pytest.approx(metrics.welch_t_test(a, b).p, rel=1e-9)

    def test_identical_samples_give_p_one(self):
        r = metrics.welch_t_test([0.7, 0.8, 0.75], [0.7, 0.8, 0.75])
        assert r.t == 0.0 and r.p == pytest.approx(1.0)

    def test_degenerate(self):
        with pytest.raises(DegenerateTestError):
            metrics.welch_t_test([0.5, 0.5, 0.5], [0.6, 0.6, 0.6])
        with pytest.raises(DegenerateTestError):
            metrics.welch_t_test([0.5], [0.6, 0.7])

    def test_incomplete_beta_against_reference(self):
        from scipy import special

        for a, b, x in [(0.5, 0.5, 0.3), (2.0, 3.0, 0.9), (4.0, 0.5, 0.01), (10.0, 10.0, 0.5)]:
            assert metrics.betainc_regularized(a, b, x) == pytest.approx(special.betainc(a, b, x), rel=1e-10)
        assert metrics.student_t_cdf(0.0, 5.0) == pytest.approx(0.5)
        assert metrics.student_t_cdf(2.0, 3.0) == pytest.approx(stats.t.cdf(2.0, 3.0), rel=1e-10)
        assert math.isclose(metrics.student_t_sf_two_sided(0.0, 4.0), 1.0)
