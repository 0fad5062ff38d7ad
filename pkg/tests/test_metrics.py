"""Metrics: confusion, quadratic kappa, F1, binary cancer metrics."""

import numpy as np
import pytest

from gleasonmil.metrics import (
    UndefinedMetricError,
    accuracy,
    binary_cancer_metrics,
    confusion,
    evaluate_labels,
    per_class_f1,
    quadratic_kappa,
)


def kappa_oracle(y_true, y_pred, k):
    """Independent straight-line evaluation of the weighted-kappa formula."""
    n = len(y_true)
    observed = [[0.0] * k for _ in range(k)]
    for t, p in zip(y_true, y_pred):
        observed[t][p] += 1.0 / n
    row = [sum(observed[i][j] for j in range(k)) for i in range(k)]
    col = [sum(observed[i][j] for i in range(k)) for j in range(k)]
    num = den = 0.0
    for i in range(k):
        for j in range(k):
            w = (i - j) ** 2 / (k - 1) ** 2
            num += w * observed[i][j]
            den += w * row[i] * col[j]
    return 1.0 - num / den


def f1_oracle(y_true, y_pred, k):
    out = []
    for c in range(k):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        out.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return out


class TestConfusion:
    def test_diagonal(self):
        cm = confusion([0, 1], [0, 1], 2)
        assert np.array_equal(cm.counts, np.diag([1, 1]))

    def test_off_diagonal(self):
        cm = confusion([0], [1], 2)
        assert cm.counts[0, 1] == 1 and cm.total == 1

    def test_random_counts_match_oracle(self):
        rng = np.random.default_rng(7)
        y_true = rng.integers(0, 4, size=1000)
        y_pred = rng.integers(0, 4, size=1000)
        cm = confusion(y_true, y_pred, 4)
        for i in range(4):
            for j in range(4):
                assert cm.counts[i, j] == int(np.sum((y_true == i) & (y_pred == j)))

    def test_errors(self):
        with pytest.raises(ValueError):
            confusion([0, 1], [0], 2)
        with pytest.raises(ValueError):
            confusion([0, 5], [0, 1], 4)


class TestQuadraticKappa:
    def test_perfect_agreement(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 4, size=200)
        y[:4] = [0, 1, 2, 3]
        assert quadratic_kappa(confusion(y, y, 4)) == pytest.approx(1.0)

    def test_hand_example(self):
        # Observed weighted disagreement 1/6, expected 1/3.
        cm = confusion([0, 1, 2], [0, 2, 1], 3)
        assert quadratic_kappa(cm) == pytest.approx(0.5)

    def test_reversed_two_class(self):
        y_true = [0, 1] * 10
        y_pred = [1, 0] * 10
        assert quadratic_kappa(confusion(y_true, y_pred, 2)) == pytest.approx(-1.0)

    def test_matches_oracle_randomized(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            k = int(rng.integers(2, 7))
            n = int(rng.integers(2, 201))
            y_true = rng.integers(0, k, size=n)
            y_pred = rng.integers(0, k, size=n)
            cm = confusion(y_true, y_pred, k)
            try:
                got = quadratic_kappa(cm)
            except UndefinedMetricError:
                # Oracle denominator must be zero in exactly these cases.
                assert len(set(y_true.tolist())) == 1 and set(y_true.tolist()) == set(y_pred.tolist())
                continue
            assert got == pytest.approx(kappa_oracle(y_true.tolist(), y_pred.tolist(), k), abs=1e-10)
            assert -1.0 - 1e-12 <= got <= 1.0 + 1e-12

    def test_ordinal_shift_invariance(self):
        # Relabeling that preserves ordinal distances (shift within a larger
        # class range) leaves kappa unchanged.
        y_true = [0, 0, 1, 2, 1]
        y_pred = [0, 1, 1, 2, 2]
        base = quadratic_kappa(confusion(y_true, y_pred, 3))
        # Embed classes 0..2 as 1..3 inside K=5... kappa normalizes by
        # (K-1)^2 so compare against the oracle with the same K instead.
        shifted = quadratic_kappa(confusion([y + 1 for y in y_true], [y + 1 for y in y_pred], 4))
        oracle = kappa_oracle([y + 1 for y in y_true], [y + 1 for y in y_pred], 4)
        assert shifted == pytest.approx(oracle, abs=1e-12)
        assert base == pytest.approx(kappa_oracle(y_true, y_pred, 3), abs=1e-12)

    def test_degenerate_errors(self):
        with pytest.raises(UndefinedMetricError):
            quadratic_kappa(confusion([1, 1, 1], [1, 1, 1], 3))


class TestF1Accuracy:
    def test_perfect(self):
        cm = confusion([0] * 5 + [1] * 5, [0] * 5 + [1] * 5, 2)
        f1, avg = per_class_f1(cm)
        assert np.allclose(f1, 1.0) and avg == pytest.approx(1.0)
        assert accuracy(cm) == pytest.approx(1.0)

    def test_absent_class_f1_zero(self):
        cm = confusion([0, 1], [0, 1], 3)
        f1, avg = per_class_f1(cm)
        assert f1[2] == 0.0
        assert avg == pytest.approx((1 + 1 + 0) / 3)

    def test_matches_oracle_randomized(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            n = int(rng.integers(1, 100))
            y_true = rng.integers(0, 4, size=n).tolist()
            y_pred = rng.integers(0, 4, size=n).tolist()
            cm = confusion(y_true, y_pred, 4)
            f1, avg = per_class_f1(cm)
            expected = f1_oracle(y_true, y_pred, 4)
            assert np.allclose(f1, expected, atol=1e-12)
            assert avg == pytest.approx(float(np.mean(expected)))
            assert accuracy(cm) == pytest.approx(
                sum(t == p for t, p in zip(y_true, y_pred)) / n)
            assert 0.0 <= accuracy(cm) <= 1.0 and np.all(f1 >= 0) and np.all(f1 <= 1)


class TestBinaryCancerMetrics:
    def test_all_correct(self):
        y = [0, 1, 2, 3, 0]
        assert binary_cancer_metrics(y, y) == (1.0, 1.0)

    def test_no_positive_predictions_undefined(self):
        precision, sensitivity = binary_cancer_metrics([0, 0, 0], [0, 0, 0], positive="cancerous")
        assert precision is None
        assert sensitivity is None  # no cancerous truth either

    def test_mixed_matches_two_by_two_table(self):
        # truth:  C C N N N ; pred: C N C N C  ->  TP=1 FP=2 FN=1
        y_true = [1, 2, 0, 0, 0]
        y_pred = [3, 0, 1, 0, 2]
        precision, sensitivity = binary_cancer_metrics(y_true, y_pred)
        assert precision == pytest.approx(1 / 3)
        assert sensitivity == pytest.approx(1 / 2)
        nc_precision, nc_sensitivity = binary_cancer_metrics(y_true, y_pred, positive="nc")
        assert nc_precision == pytest.approx(1 / 2)  # TP=1 (idx 3), FP=1 (idx 1)
        assert nc_sensitivity == pytest.approx(1 / 3)

    def test_bad_positive(self):
        with pytest.raises(ValueError):
            binary_cancer_metrics([0], [0], positive="both")


class TestEvaluationReport:
    def test_report_fields_and_text(self):
        y_true = [0, 1, 2, 3, 0, 1]
        y_pred = [0, 1, 2, 2, 0, 0]
        report = evaluate_labels(y_true, y_pred)
        assert report.acc == pytest.approx(4 / 6)
        assert report.kappa is not None
        text = report.to_text()
        assert "ACC:" in text and "kappa:" in text and "GG5" in text
        rows = dict(report.to_csv_rows())
        assert float(rows["accuracy"]) == pytest.approx(4 / 6)
        assert "kappa" in rows
