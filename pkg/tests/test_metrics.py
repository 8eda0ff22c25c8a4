import numpy as np
import pytest

from cssl.metrics import (
    EvalReport,
    MetricError,
    accuracy,
    auc,
    binary_auc,
    confusion_matrix,
    evaluate_predictions,
    f1,
    midranks,
)


def pair_count_auc(y, s, positive=1):
    """Fraction of (positive, negative) pairs ordered correctly; ties count half."""
    pos = [v for v, t in zip(s, y) if t == positive]
    neg = [v for v, t in zip(s, y) if t != positive]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def loop_f1(y, pred, k):
    scores = []
    for c in range(k):
        tp = sum(1 for a, b in zip(y, pred) if a == c and b == c)
        fp = sum(1 for a, b in zip(y, pred) if a != c and b == c)
        fn = sum(1 for a, b in zip(y, pred) if a == c and b != c)
        scores.append(0.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return scores[1] if k == 2 else sum(scores) / k


def test_auc_perfect():
    assert binary_auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0


def test_auc_all_tied():
    assert binary_auc([0, 1, 0, 1, 1], [0.3] * 5) == 0.5


def test_auc_hand_example():
    assert binary_auc([1, 1, 0, 0], [0.9, 0.4, 0.5, 0.1]) == 0.75


def test_midranks():
    np.testing.assert_array_equal(midranks([3.0, 1.0, 3.0, 2.0]), [3.5, 1.0, 3.5, 2.0])


def test_auc_missing_class_named():
    with pytest.raises(MetricError, match="class 2"):
        auc([0, 1, 1], np.full((3, 3), 1 / 3))


def test_binary_metrics_match_oracles_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(4, 30))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        s = rng.integers(0, 5, n) / 4.0  # coarse grid forces ties
        pred = (s > 0.5).astype(int)
        assert binary_auc(y, s) == pair_count_auc(y, s)
        assert accuracy(y, pred) == sum(a == b for a, b in zip(y, pred)) / n
        assert f1(y, pred, 2) == loop_f1(y, pred, 2)


def test_multiclass_metrics_match_oracles():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n, k = int(rng.integers(8, 30)), int(rng.integers(3, 5))
        y = rng.integers(0, k, n)
        y[:k] = np.arange(k)
        p = rng.integers(0, 4, (n, k)).astype(float)
        ovr = np.mean([pair_count_auc(y, p[:, c], positive=c) for c in range(k)])
        assert auc(y, p, k) == pytest.approx(ovr, abs=1e-15)
        pred = p.argmax(axis=1)
        assert f1(y, pred, k) == pytest.approx(loop_f1(y, pred, k), abs=1e-15)


def test_confusion_matrix_counts():
    cm = confusion_matrix([0, 1, 1, 2], [0, 2, 1, 2], 3)
    np.testing.assert_array_equal(cm, [[1, 0, 0], [0, 1, 1], [0, 0, 1]])


def test_evaluate_predictions_in_unit_range():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 2, 40)
    p = rng.dirichlet([1, 1], 40)
    report = evaluate_predictions(y, p, 2)
    for v in (report.acc, report.auc, report.f1):
        assert 0.0 <= v <= 1.0
    assert report.n_test == 40 and set(report.per_class) == {"0", "1"}


def test_evaluate_single_class_rejected():
    with pytest.raises(MetricError):
        evaluate_predictions([1, 1], np.array([[0.2, 0.8], [0.4, 0.6]]), 2)


def test_aggregate_mean_and_std():
    reports = [EvalReport(a, a, a, 10) for a in (0.6, 0.8)]
    agg = EvalReport.aggregate(reports, [0, 1])
    assert agg.acc == pytest.approx(0.7)
    assert agg.std["acc"] == pytest.approx(0.1)
    assert agg.seeds == [0, 1]
