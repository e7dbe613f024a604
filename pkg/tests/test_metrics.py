import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitguard.errors import UsageError
from splitguard.metrics import ConfusionCounts, auroc, metrics, rwcg


def pairwise_auroc(benign, adv):
    wins = sum((a > b) + 0.5 * (a == b) for a in adv for b in benign)
    return wins / (len(adv) * len(benign))


def test_worked_example():
    m = metrics(ConfusionCounts(tp=9, tn=9, fp=1, fn=1))
    for v in (m.accuracy, m.precision, m.recall, m.f1_anom, m.balanced_accuracy, m.dr):
        assert v == pytest.approx(0.9)
    assert m.far == pytest.approx(0.1)
    assert m.degenerate == []


def test_zero_denominator_flags():
    m = metrics(ConfusionCounts(tp=0, tn=5, fp=0, fn=3))
    assert m.precision == 0 and "precision" in m.degenerate
    assert m.f1_anom == 0 and "f1_anom" in m.degenerate


def test_perfect_detector():
    m = metrics(ConfusionCounts(tp=4, tn=6, fp=0, fn=0))
    assert m.accuracy == m.f1_anom == m.balanced_accuracy == 1.0 and m.far == 0.0


def test_negative_counts_rejected():
    with pytest.raises(UsageError):
        ConfusionCounts(-1, 0, 0, 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_identities(tp, tn, fp, fn):
    c = ConfusionCounts(tp, tn, fp, fn)
    m = metrics(c)
    assert c.total == tp + tn + fp + fn
    assert m.balanced_accuracy == pytest.approx((m.dr + 1 - m.far) / 2, abs=1e-15)
    if m.precision + m.recall > 0:
        assert m.f1_anom == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall))
    else:
        assert m.f1_anom == 0
    for v in (m.accuracy, m.precision, m.recall, m.f1_anom, m.balanced_accuracy, m.far, m.dr):
        assert 0 <= v <= 1


def test_from_predictions():
    c = ConfusionCounts.from_predictions([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
    assert (c.tp, c.tn, c.fp, c.fn) == (2, 1, 1, 1)


def test_auroc_examples():
    assert auroc([0.1, 0.2], [0.8, 0.9]) == 1.0
    assert auroc([0.8, 0.9], [0.1, 0.2]) == 0.0
    assert auroc([0.5] * 4, [0.5] * 3) == 0.5
    with pytest.raises(UsageError):
        auroc([], [1.0])


def test_auroc_random_20_20():
    rng = np.random.default_rng(0)
    b, a = rng.random(20), rng.random(20)
    assert auroc(b, a) == pytest.approx(pairwise_auroc(b, a), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=30), st.lists(st.integers(-5, 5), min_size=1, max_size=30))
def test_auroc_matches_pairwise_with_ties(b, a):
    assert abs(auroc(b, a) - pairwise_auroc(b, a)) <= 1e-12


def test_rwcg():
    assert rwcg([0.9, 0.7, 0.6], [True, True, False]) == (pytest.approx(0.2), False)
    assert rwcg([0.8, 0.8], [True, True]) == (0.0, True)
    assert rwcg([0.3, 0.3], [False, False]) == (0.0, True)
    assert rwcg([0.5] * 4, [True, False, True, False]) == (0.0, False)
