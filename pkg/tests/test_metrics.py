import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from unite import metrics


# -- brute-force references ---------------------------------------------------


def brute_f1(y, p):
    tp = sum(1 for a, b in zip(y, p) if a == 1 and b == 1)
    fp = sum(1 for a, b in zip(y, p) if a == 0 and b == 1)
    fn = sum(1 for a, b in zip(y, p) if a == 1 and b == 0)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)


def brute_kappa(y, p):
    n = len(y)
    agree = sum(1 for a, b in zip(y, p) if a == b) / n
    chance = sum((sum(1 for a in y if a == c) / n) * (sum(1 for b in p if b == c) / n) for c in (0, 1))
    return 0.0 if chance == 1 else (agree - chance) / (1 - chance)


def brute_pr_auc(y, s):
    n_pos = sum(y)
    area, prev_rec = 0.0, 0.0
    for t in sorted(set(s), reverse=True):
        flagged = [a for a, b in zip(y, s) if b >= t]
        tp = sum(flagged)
        prec, rec = tp / len(flagged), tp / n_pos
        area += prec * (rec - prev_rec)
        prev_rec = rec
    return area


def random_instance(rng):
    n = int(rng.integers(1, 51))
    y = rng.integers(0, 2, size=n)
    if y.sum() == 0:
        y[rng.integers(n)] = 1
    p = rng.integers(0, 2, size=n)
    # coarse scores so ties are common
    s = rng.integers(0, 6, size=n) / 5.0
    return y, p, s


class TestF1:
    def test_perfect(self):
        assert metrics.f1([1, 0, 1], [1, 0, 1]) == 1.0

    def test_half_precision_half_recall(self):
        # tp=1, fp=1, fn=1
        assert metrics.f1([1, 1, 0, 0], [1, 0, 1, 0]) == pytest.approx(0.5)

    def test_no_positive_predictions(self):
        assert metrics.f1([1, 1, 0], [0, 0, 0]) == 0.0

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            metrics.f1([], [])

    def test_independent_of_true_negatives(self):
        base = metrics.f1([1, 1, 0], [1, 0, 1])
        assert metrics.f1([1, 1, 0] + [0] * 20, [1, 0, 1] + [0] * 20) == base


class TestKappa:
    def test_perfect(self):
        assert metrics.cohens_kappa([0, 1, 1, 0], [0, 1, 1, 0]) == 1.0

    def test_confusion_example(self):
        # rows = true, cols = pred: [[45, 15], [25, 15]]
        y = [0] * 60 + [1] * 40
        p = [0] * 45 + [1] * 15 + [0] * 25 + [1] * 15
        assert metrics.cohens_kappa(y, p) == pytest.approx((0.60 - 0.54) / (1 - 0.54), abs=1e-12)
        assert metrics.cohens_kappa(y, p) == pytest.approx(0.13043, abs=1e-4)

    def test_chance_agreement(self):
        rng = np.random.default_rng(11)
        y = rng.integers(0, 2, size=10000)
        p = rng.integers(0, 2, size=10000)
        assert abs(metrics.cohens_kappa(y, p)) < 0.05

    def test_degenerate_expected_agreement(self):
        assert metrics.cohens_kappa([1, 1, 1], [1, 1, 1]) == 0.0


class TestPrAuc:
    def test_perfect_ranking(self):
        assert metrics.pr_auc([1, 1, 0, 0], [0.9, 0.8, 0.3, 0.1]) == pytest.approx(1.0)

    def test_interleaved(self):
        assert metrics.pr_auc([1, 0, 1, 0], [0.9, 0.8, 0.3, 0.1]) == pytest.approx(0.5 + (2 / 3) * 0.5, abs=1e-12)

    def test_random_scores_match_prevalence(self):
        rng = np.random.default_rng(5)
        y = (rng.random(10000) < 0.3).astype(int)
        assert metrics.pr_auc(y, rng.random(10000)) == pytest.approx(y.mean(), abs=0.03)

    def test_no_positive(self):
        with pytest.raises(ValueError):
            metrics.pr_auc([0, 0], [0.1, 0.2])

    def test_ties_grouped(self):
        # all tied: a single operating point at prevalence
        assert metrics.pr_auc([1, 0, 0, 0], [0.5] * 4) == pytest.approx(0.25)

    def test_matches_sklearn_average_precision(self):
        sklearn_metrics = pytest.importorskip("sklearn.metrics")
        rng = np.random.default_rng(2)
        for _ in range(50):
            y, _, s = random_instance(rng)
            assert metrics.pr_auc(y, s) == pytest.approx(sklearn_metrics.average_precision_score(y, s), abs=1e-12)


def test_brute_force_agreement_on_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        y, p, s = random_instance(rng)
        assert metrics.f1(y, p) == brute_f1(list(y), list(p))
        assert metrics.cohens_kappa(y, p) == pytest.approx(brute_kappa(list(y), list(p)), abs=1e-12)
        assert metrics.pr_auc(y, s) == pytest.approx(brute_pr_auc(list(y), list(s)), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_permutation_and_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    y, p, s = random_instance(rng)
    perm = rng.permutation(y.size)
    assert metrics.f1(y[perm], p[perm]) == metrics.f1(y, p)
    assert metrics.cohens_kappa(y[perm], p[perm]) == pytest.approx(metrics.cohens_kappa(y, p), abs=1e-12)
    assert metrics.pr_auc(y[perm], s[perm]) == pytest.approx(metrics.pr_auc(y, s), abs=1e-12)
    assert metrics.pr_auc(y, np.exp(3 * s) - 7) == pytest.approx(metrics.pr_auc(y, s), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_kappa_one_iff_equal(seed):
    rng = np.random.default_rng(seed)
    y, p, _ = random_instance(rng)
    if len(set(y)) == 2:
        assert (metrics.cohens_kappa(y, y) == 1.0)
    k = metrics.cohens_kappa(y, p)
    if not np.array_equal(y, p):
        assert k < 1.0
    assert -1.0 <= k <= 1.0


class TestTTest:
    def test_hand_example(self):
        t, p = metrics.paired_t_test([1, 2, 3])
        assert t == pytest.approx(2 / (1 / math.sqrt(3)), abs=1e-12)
        assert t == pytest.approx(3.4641, abs=1e-4)
        # closed form for df = 2
        assert p == pytest.approx(0.5 * (1 - t / math.sqrt(t * t + 2)), abs=1e-12)
        assert p == pytest.approx(0.0371, abs=1e-4)

    def test_strong_effect(self):
        d = 0.05 + 0.01 * np.array([1, -1, 1, -1, 1, -1]) * math.sqrt(5 / 6)
        t, p = metrics.paired_t_test(d)
        assert np.std(d, ddof=1) == pytest.approx(0.01)
        assert t == pytest.approx(0.05 / (0.01 / math.sqrt(6)), abs=1e-9)
        assert t == pytest.approx(12.25, abs=0.01)
        assert p < 0.01

    def test_degenerate(self):
        with pytest.raises(ValueError, match="degenerate"):
            metrics.paired_t_test([0.0, 1e-18, -1e-18])

    @pytest.mark.parametrize("df", [1, 2, 3, 5, 10, 30, 200])
    def test_cdf_against_scipy(self, df):
        for t in np.linspace(-8, 8, 41):
            assert metrics.student_t_cdf(t, df) == pytest.approx(stats.t.cdf(t, df), abs=1e-6)
