from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softsense.metrics import (
    TaskMetrics,
    auroc,
    format_table,
    metrics_report,
    read_metrics_csv,
    recall,
    roc_points,
    task_metrics,
    write_metrics_csv,
)
from softsense.numeric import make_rng


def brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(Fraction(1) if p > n else Fraction(1, 2) if p == n else Fraction(0) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


class TestAuroc:
    def test_perfect(self):
        assert auroc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_interleaved(self):
        assert auroc([0.1, 0.2, 0.3, 0.4], [0, 1, 0, 1]) == 0.75

    def test_single_class_absent(self):
        assert auroc([0.3, 0.6], [1, 1]) is None
        assert auroc([0.3, 0.6], [0, 0]) is None

    def test_all_ties(self):
        assert auroc([0.5] * 4, [1, 0, 1, 0]) == 0.5

    def test_brute_force_trials(self):
        rng = make_rng(0)
        for _ in range(1000):
            n = int(rng.integers(2, 13))
            labels = rng.integers(0, 2, n)
            if labels.all() or not labels.any():
                labels[0] = 1 - labels[0]
            scores = rng.integers(0, 5, n) / 4.0  # coarse grid so ties are common
            assert auroc(scores, labels) == float(brute_auroc(scores.tolist(), labels.tolist()))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.booleans()), min_size=2, max_size=40))
    def test_midrank_symmetry(self, pairs):
        scores = np.array([p[0] for p in pairs])
        labels = np.array([p[1] for p in pairs])
        a = auroc(scores, labels)
        if a is None:
            return
        assert abs(a + auroc(-scores, labels) - 1.0) < 1e-12

    def test_monotone_invariance(self):
        rng = make_rng(1)
        s = rng.normal(size=200)
        y = rng.random(200) < 0.3
        base = auroc(s, y)
        assert auroc(np.exp(s), y) == base
        assert auroc(s**3 + 2 * s, y) == base


class TestRecall:
    def test_all_hit(self):
        assert recall([0.9, 0.9], [1, 1]) == 1.0

    def test_all_miss(self):
        assert recall([0.1, 0.1, 0.9], [1, 1, 0]) == 0.0

    def test_half(self):
        assert recall([0.6, 0.4], [1, 1]) == 0.5

    def test_threshold_inclusive(self):
        assert recall([0.5], [1]) == 1.0

    def test_no_positives(self):
        assert recall([0.9], [0]) is None


class TestRoc:
    def test_perfect_classifier_hull(self):
        fpr, tpr, _ = roc_points([0.9, 0.8, 0.1], [1, 1, 0])
        pts = set(zip(fpr.tolist(), tpr.tolist()))
        assert {(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)} <= pts

    def test_trapezoid_area_matches_auroc(self):
        rng = make_rng(2)
        s = rng.integers(0, 10, 300) / 10
        y = rng.random(300) < 0.4
        fpr, tpr, _ = roc_points(s, y)
        area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
        assert area == pytest.approx(auroc(s, y), abs=1e-12)


class TestReport:
    def test_single_seed_std_zero(self):
        m = TaskMetrics([0.8], [0.5], [3], [7])
        r = metrics_report([m])
        assert r.auroc == [0.8] and r.auroc_std == [0.0]

    def test_two_seeds(self):
        r = metrics_report([TaskMetrics([0.7], [0.1], [1], [1]), TaskMetrics([0.9], [0.3], [1], [1])])
        assert r.auroc[0] == pytest.approx(0.8) and r.auroc_std[0] == pytest.approx(0.1)

    def test_all_absent(self):
        r = metrics_report([TaskMetrics([None], [None], [0], [4])] * 3)
        assert r.auroc == [None] and r.recall == [None]

    def test_masked_task_metrics(self):
        scores = np.array([[0.9, 0.2], [0.1, 0.8], [0.7, 0.3]])
        labels = np.array([[1, 0], [0, 0], [1, 0]])
        mask = np.array([[1, 1], [1, 1], [0, 1]])
        m = task_metrics(scores, labels, mask)
        assert m.auroc == [1.0, None]
        assert m.pos == [1, 0] and m.neg == [1, 3]


class TestFormatting:
    def test_absent_cell(self):
        text = format_table(TaskMetrics([0.75, None], [1.0, None], [2, 0], [2, 5]))
        assert "--" in text.splitlines()[2]

    def test_csv_round_trip(self, tmp_path):
        m = TaskMetrics([0.1 + 0.2, None, 2 / 3], [0.5, None, 1 / 7], [1, 0, 3], [4, 5, 6])
        write_metrics_csv(m, tmp_path / "m.csv")
        back = read_metrics_csv(tmp_path / "m.csv")
        assert back.auroc == m.auroc and back.recall == m.recall
        assert back.pos == m.pos and back.neg == m.neg
        assert format_table(back) == format_table(m)
