import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fdvae.errors import LengthMismatch, NonBinaryValue, UndefinedRate
from fdvae.metrics import (
    GroupConfusion,
    GroupCounts,
    equal_opportunity,
    equalized_accuracy,
    equalized_odds,
    evaluate_predictions,
    group_confusion,
    read_prediction_log,
    standard_accuracy,
    write_prediction_log,
)

from .conftest import DATA


def _cm(tpr0, tnr0, tpr1, tnr1, n=10):
    def counts(tpr, tnr):
        tp, tn = round(tpr * n), round(tnr * n)
        return GroupCounts(tp=tp, fp=n - tn, tn=tn, fn=n - tp)
    return GroupConfusion(counts(tpr0, tnr0), counts(tpr1, tnr1))


@pytest.mark.parametrize("model,acc,eacc", [("a", 0.74, 0.50), ("b", 0.26, 0.50)])
def test_skewed_log_fixture(model, acc, eacc):
    _, pred, y, g = read_prediction_log(DATA / f"skewed_log_model_{model}.csv")
    cm = group_confusion(pred, y, g)
    assert abs(standard_accuracy(cm) - acc) < 1e-12
    assert abs(equalized_accuracy(cm) - eacc) < 1e-12


def test_skewed_log_model_a_gaps():
    _, pred, y, g = read_prediction_log(DATA / "skewed_log_model_a.csv")
    cm = group_confusion(pred, y, g)
    # protected group 1: TPR 0.9; group 0: TPR 0.1
    assert cm.tpr(1) == pytest.approx(0.9) and cm.tpr(0) == pytest.approx(0.1)
    assert equal_opportunity(cm) == pytest.approx(0.8)
    assert equalized_odds(cm) == pytest.approx(0.8)


def test_hand_tally_of_eight_samples():
    pred = [1, 0, 1, 1, 0, 0, 1, 0]
    y = [1, 1, 0, 1, 0, 1, 1, 0]
    g = [0, 0, 0, 0, 1, 1, 1, 1]
    cm = group_confusion(pred, y, g)
    assert cm.g0 == GroupCounts(tp=2, fp=1, tn=0, fn=1)
    assert cm.g1 == GroupCounts(tp=1, fp=0, tn=2, fn=1)
    assert cm.n == 8


def test_perfect_predictions_have_no_errors():
    y = np.array([0, 1, 1, 0, 1, 0])
    cm = group_confusion(y, y, [0, 0, 0, 1, 1, 1])
    assert cm.g0.fp == cm.g0.fn == cm.g1.fp == cm.g1.fn == 0
    assert standard_accuracy(cm) == 1.0
    assert equalized_accuracy(cm) == 1.0


def test_closed_form_extremes():
    assert equal_opportunity(_cm(0.0, 0.5, 1.0, 0.5)) == 1.0
    assert equalized_odds(_cm(0.0, 0.5, 1.0, 0.5)) == 0.5
    assert equal_opportunity(_cm(0.3, 0.6, 0.3, 0.2)) == 0.0
    assert equalized_odds(_cm(0.3, 0.6, 0.3, 0.6)) == 0.0


def test_errors():
    with pytest.raises(LengthMismatch):
        group_confusion([], [], [])
    with pytest.raises(LengthMismatch):
        group_confusion([0, 1], [0], [0, 1])
    with pytest.raises(NonBinaryValue):
        group_confusion([0, 2], [0, 1], [0, 1])
    cm = group_confusion([1, 0], [1, 0], [0, 0])  # group 1 empty
    with pytest.raises(UndefinedRate):
        equal_opportunity(cm)
    cm = group_confusion([1, 1], [1, 1], [0, 1])  # no negatives anywhere
    assert equal_opportunity(cm) == 0.0
    with pytest.raises(UndefinedRate):
        equalized_odds(cm)
    with pytest.raises(UndefinedRate):
        equalized_accuracy(cm)


def test_subsampling_one_group_barely_moves_equalized_accuracy():
    rng = np.random.default_rng(0)
    n = 10_000
    g = rng.integers(0, 2, n)
    y = np.where(rng.random(n) < 0.8, g, 1 - g)  # skewed log
    correct = rng.random(n) < np.where(g == 1, 0.9, 0.6)
    pred = np.where(correct, y, 1 - y)
    full = group_confusion(pred, y, g)
    keep = (g == 0) | (rng.random(n) < 0.5)
    sub = group_confusion(pred[keep], y[keep], g[keep])
    assert abs(equalized_accuracy(full) - equalized_accuracy(sub)) < 0.02
    assert abs(standard_accuracy(full) - standard_accuracy(sub)) > 0.02


def test_prediction_log_round_trip(tmp_path):
    path = tmp_path / "p.csv"
    write_prediction_log(path, ["a", "b", "c"], [1, 0, 1], [1, 1, 0], [0, 1, 1])
    ids, pred, y, g = read_prediction_log(path)
    assert ids == ["a", "b", "c"]
    assert pred.tolist() == [1, 0, 1] and y.tolist() == [1, 1, 0] and g.tolist() == [0, 1, 1]


# --- properties --------------------------------------------------------------

def _log(min_size=8):
    """Random prediction logs where every (target, group) cell is populated."""
    base = np.array([[0, 0], [0, 1], [1, 0], [1, 1]])
    return st.tuples(
        arrays(np.int64, st.integers(0, 40), elements=st.integers(0, 1)),
        arrays(np.int64, st.integers(0, 40), elements=st.integers(0, 1)),
        arrays(np.int64, st.integers(0, 40), elements=st.integers(0, 1)),
        arrays(np.int64, 4, elements=st.integers(0, 1)),
    ).map(lambda t: _assemble(base, *t))


def _assemble(base, p, y, g, p_base):
    n = min(len(p), len(y), len(g))
    y = np.concatenate([base[:, 0], y[:n]])
    g = np.concatenate([base[:, 1], g[:n]])
    p = np.concatenate([p_base, p[:n]])
    return p, y, g


@settings(max_examples=150, deadline=None)
@given(_log(), st.integers(1, 5))
def test_duplicating_a_group_leaves_equalized_accuracy_unchanged(log, k):
    p, y, g = log
    m = g == 1
    p2 = np.concatenate([p] + [p[m]] * (k - 1))
    y2 = np.concatenate([y] + [y[m]] * (k - 1))
    g2 = np.concatenate([g] + [g[m]] * (k - 1))
    assert equalized_accuracy(group_confusion(p2, y2, g2)) == equalized_accuracy(group_confusion(p, y, g))


@settings(max_examples=150, deadline=None)
@given(_log())
def test_metrics_symmetric_under_group_relabeling(log):
    p, y, g = log
    a = evaluate_predictions(p, y, g)
    b = evaluate_predictions(p, y, 1 - g)
    for field in ("accuracy", "equalized_accuracy", "equal_opportunity", "equalized_odds"):
        assert math.isclose(getattr(a, field), getattr(b, field), abs_tol=1e-15)
    assert group_confusion(p, y, 1 - g) == group_confusion(p, y, g).swapped()


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), arrays(np.int64, 4, elements=st.integers(0, 30)), st.randoms(use_true_random=False))
def test_balanced_set_accuracy_equals_equalized_accuracy(n, wrong, rnd):
    wrong = np.minimum(wrong, n)
    pred, y, g = [], [], []
    for (t, grp), w in zip(((0, 0), (0, 1), (1, 0), (1, 1)), wrong):
        for i in range(n):
            y.append(t)
            g.append(grp)
            pred.append(1 - t if i < w else t)
    cm = group_confusion(pred, y, g)
    assert math.isclose(standard_accuracy(cm), equalized_accuracy(cm), rel_tol=0, abs_tol=1e-12)


@settings(max_examples=100, deadline=None)
@given(_log(), st.randoms(use_true_random=False))
def test_group_independent_predictor_is_fair(log, rnd):
    _, y, g = log
    # prediction depends on the target only, with the same flip pattern per target
    flip = {0: rnd.random() < 0.5, 1: rnd.random() < 0.5}
    p = np.array([1 - t if flip[int(t)] else t for t in y])
    cm = group_confusion(p, y, g)
    assert equal_opportunity(cm) == 0.0
    assert equalized_odds(cm) == 0.0


@settings(max_examples=100, deadline=None)
@given(_log())
def test_metrics_lie_in_unit_interval(log):
    rep = evaluate_predictions(*log)
    for v in rep.as_dict().values():
        assert 0.0 <= v <= 1.0
