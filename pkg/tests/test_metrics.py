"""Metrics against naive brute-force oracles, plus hand-frozen edge cases."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttalign import metrics as mx
from ttalign.errors import ContractError


# ---------------------------------------------------------------------------
# brute-force oracles (independent implementations, deliberately naive)
# ---------------------------------------------------------------------------

def oracle_balanced_accuracy(yt, yp):
    recalls = []
    for c in sorted(set(yt)):
        idx = [i for i, v in enumerate(yt) if v == c]
        recalls.append(sum(1 for i in idx if yp[i] == c) / len(idx))
    return sum(recalls) / len(recalls)


def oracle_kappa(yt, yp):
    n = len(yt)
    labels = sorted(set(yt) | set(yp))
    p_o = sum(1 for a, b in zip(yt, yp) if a == b) / n
    p_e = sum(
        (sum(1 for v in yt if v == c) / n) * (sum(1 for v in yp if v == c) / n)
        for c in labels
    )
    if p_e == 1.0:
        return 0.0
    return (p_o - p_e) / (1 - p_e)


def oracle_weighted_f1(yt, yp):
    n = len(yt)
    out = 0.0
    for c in sorted(set(yt)):
        tp = sum(1 for a, b in zip(yt, yp) if a == c and b == c)
        fp = sum(1 for a, b in zip(yt, yp) if a != c and b == c)
        fn = sum(1 for a, b in zip(yt, yp) if a == c and b != c)
        prec = tp / (tp + fp) if tp + fp > 0 else 0.0
        rec = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        out += ((tp + fn) / n) * f1
    return out


def oracle_auroc_pairwise(yt, s):
    """O(n^2) over all (positive, negative) pairs with half credit for ties."""
    pos = [s[i] for i in range(len(yt)) if yt[i] == 1]
    neg = [s[i] for i in range(len(yt)) if yt[i] == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def oracle_average_precision(yt, s):
    """Recompute precision/recall from scratch at every distinct threshold."""
    thresholds = sorted(set(s), reverse=True)
    n_pos = sum(yt)
    ap = 0.0
    prev_recall = 0.0
    for th in thresholds:
        tp = sum(1 for i in range(len(yt)) if s[i] >= th and yt[i] == 1)
        fp = sum(1 for i in range(len(yt)) if s[i] >= th and yt[i] == 0)
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


# ---------------------------------------------------------------------------
# frozen exact values
# ---------------------------------------------------------------------------

class TestFrozenValues:
    def test_perfect_predictions(self):
        yt = [0, 1, 2, 0, 1, 2]
        assert mx.balanced_accuracy(yt, yt) == 1.0
        assert mx.cohens_kappa(yt, yt) == 1.0
        assert mx.weighted_f1(yt, yt) == 1.0

    def test_constant_predictor_kappa_zero(self):
        yt = [0, 0, 1, 1]
        yp = [1, 1, 1, 1]
        assert mx.cohens_kappa(yt, yp) == 0.0

    def test_degenerate_agreement_kappa(self):
        # all true labels and predictions in one class: p_e = 1, kappa defined 0
        assert mx.cohens_kappa([1, 1, 1], [1, 1, 1]) == 0.0

    def test_balanced_accuracy_ignores_absent_classes(self):
        # class 2 never occurs in y_true; predictions into it only hurt class 0/1 recall
        yt = [0, 0, 1, 1]
        yp = [0, 2, 1, 1]
        assert mx.balanced_accuracy(yt, yp) == pytest.approx((0.5 + 1.0) / 2)

    def test_auroc_perfect_and_reversed_and_ties(self):
        yt = [0, 0, 1, 1]
        assert mx.auroc(yt, [0.1, 0.2, 0.8, 0.9]) == 1.0
        assert mx.auroc(yt, [0.9, 0.8, 0.2, 0.1]) == 0.0
        assert mx.auroc(yt, [0.5, 0.5, 0.5, 0.5]) == 0.5

    def test_auc_pr_single_positive_ranked_last(self):
        for n in (4, 9, 17):
            yt = [0] * (n - 1) + [1]
            scores = list(np.linspace(1.0, 0.01, n))  # positive gets the lowest score
            assert mx.auc_pr(yt, scores) == pytest.approx(1.0 / n, abs=1e-12)

    def test_auc_pr_perfect(self):
        assert mx.auc_pr([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0

    def test_errors(self):
        with pytest.raises(ContractError):
            mx.balanced_accuracy([], [])
        with pytest.raises(ContractError):
            mx.balanced_accuracy([0, 1], [0])
        with pytest.raises(ContractError):
            mx.auroc([1, 1, 1], [0.1, 0.2, 0.3])  # single class
        with pytest.raises(ContractError):
            mx.auroc([0, 1, 2], [0.1, 0.2, 0.3])  # not binary
        with pytest.raises(ContractError):
            mx.evaluate_predictions([0, 1], [0, 1], 2, scores=None)


class TestEvalResult:
    def test_values_consistent_with_confusion(self):
        rng = np.random.default_rng(5)
        yt = rng.integers(0, 4, size=60)
        yp = rng.integers(0, 4, size=60)
        res = mx.evaluate_predictions(yt, yp, 4)
        cm = res.confusion
        assert cm.sum() == res.n == 60
        support = cm.sum(axis=1)
        present = support > 0
        recomputed = (cm.diagonal()[present] / support[present]).mean()
        assert res.values["balanced_accuracy"] == pytest.approx(recomputed, abs=1e-15)
        assert res.support == support.tolist()
        assert set(res.values) == set(mx.MULTICLASS_METRICS)

    def test_binary_includes_ranking_metrics(self):
        rng = np.random.default_rng(6)
        yt = rng.integers(0, 2, size=50)
        yt[:2] = [0, 1]
        scores = rng.random(50)
        res = mx.evaluate_predictions(yt, (scores > 0.5).astype(int), 2, scores=scores)
        assert set(res.values) == set(mx.BINARY_METRICS)

    def test_monitoring_metric_choice(self):
        assert mx.monitoring_metric(2) == "auroc"
        assert mx.monitoring_metric(4) == "cohens_kappa"
        assert mx.monitoring_metric(5) == "cohens_kappa"


class TestOracleEquivalence:
    """Randomized equivalence against the naive implementations, 1e-12 tolerance."""

    N_INSTANCES = 250  # x4 metric families exceeds 1000 instances overall

    def test_threshold_metrics(self):
        rng = np.random.default_rng(123)
        for trial in range(self.N_INSTANCES):
            n = int(rng.integers(2, 40))
            n_cls = int(rng.integers(2, 6))
            yt = rng.integers(0, n_cls, size=n).tolist()
            yp = rng.integers(0, n_cls, size=n).tolist()
            assert abs(mx.balanced_accuracy(yt, yp) - oracle_balanced_accuracy(yt, yp)) < 1e-12
            assert abs(mx.cohens_kappa(yt, yp) - oracle_kappa(yt, yp)) < 1e-12
            assert abs(mx.weighted_f1(yt, yp) - oracle_weighted_f1(yt, yp)) < 1e-12

    def test_ranking_metrics(self):
        rng = np.random.default_rng(321)
        for trial in range(self.N_INSTANCES):
            n = int(rng.integers(3, 40))
            yt = rng.integers(0, 2, size=n)
            yt[0], yt[1] = 0, 1  # both classes present
            yt = yt.tolist()
            if trial % 3 == 0:
                scores = rng.integers(0, 5, size=n).astype(float) / 4.0  # heavy ties
            else:
                scores = rng.random(n)
            scores = scores.tolist()
            assert abs(mx.auroc(yt, scores) - oracle_auroc_pairwise(yt, scores)) < 1e-12
            assert abs(mx.auc_pr(yt, scores) - oracle_average_precision(yt, scores)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(min_value=0, max_value=2**31 - 1),
    n=st.integers(min_value=2, max_value=30),
)
def test_property_metric_bounds_and_permutation_invariance(seed, n):
    rng = np.random.default_rng(seed)
    yt = rng.integers(0, 3, size=n)
    yp = rng.integers(0, 3, size=n)
    ba = mx.balanced_accuracy(yt, yp)
    f1 = mx.weighted_f1(yt, yp)
    kappa = mx.cohens_kappa(yt, yp)
    assert 0.0 <= ba <= 1.0 and 0.0 <= f1 <= 1.0 and -1.0 <= kappa <= 1.0
    perm = rng.permutation(n)
    assert mx.balanced_accuracy(yt[perm], yp[perm]) == pytest.approx(ba, abs=1e-15)
    assert mx.weighted_f1(yt[perm], yp[perm]) == pytest.approx(f1, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**31 - 1))
def test_property_auroc_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 30))
    yt = rng.integers(0, 2, size=n)
    yt[0], yt[1] = 0, 1
    s = rng.random(n)
    base = mx.auroc(yt, s)
    assert mx.auroc(yt, 3.0 * s + 1.0) == pytest.approx(base, abs=1e-12)
    assert mx.auroc(yt, np.exp(s)) == pytest.approx(base, abs=1e-12)
