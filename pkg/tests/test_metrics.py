"""Metrics: rank AUC against brute force, F1, group rates, evaluate()."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdep import layers as L
from cdep import metrics as M


def brute_auc(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    pos = scores[labels]
    neg = scores[~labels]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def test_auc_hand_case_with_ties():
    # pos scores {0.9, 0.5}, neg scores {0.5, 0.1}:
    # pairs: (.9,.5)=1 (.9,.1)=1 (.5,.5)=.5 (.5,.1)=1 -> 3.5/4
    scores = [0.9, 0.5, 0.5, 0.1]
    labels = [1, 1, 0, 0]
    assert M.rank_auc(scores, labels) == pytest.approx(3.5 / 4.0, abs=1e-12)


def test_auc_perfect_and_inverted():
    assert M.rank_auc([0.1, 0.9], [0, 1]) == 1.0
    assert M.rank_auc([0.9, 0.1], [0, 1]) == 0.0
    assert M.rank_auc([0.5, 0.5], [0, 1]) == 0.5


def test_auc_single_class_rejected():
    with pytest.raises(M.MetricError):
        M.rank_auc([0.2, 0.4], [1, 1])
    with pytest.raises(M.MetricError):
        M.rank_auc([0.2, 0.4], [0, 0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()),
                min_size=2, max_size=30))
def test_auc_matches_brute_force_pair_counting(pairs):
    scores = [p[0] / 5.0 for p in pairs]
    labels = [p[1] for p in pairs]
    if all(labels) or not any(labels):
        return
    assert M.rank_auc(scores, labels) == pytest.approx(
        brute_auc(scores, labels), abs=1e-12)


def test_f1_hand_case():
    # tp=2, fp=1, fn=1 -> f1 = 4/6
    preds = [1, 1, 1, 0, 0]
    labels = [1, 1, 0, 1, 0]
    assert M.f1_score(preds, labels) == pytest.approx(2 / 3, abs=1e-12)
    assert M.f1_score([0, 0], [0, 0]) == 0.0  # degenerate: no positives


def test_wcr_hand_case():
    # group a: negatives at idx 0,1 with preds 1,0 -> 1/2
    # group b: negatives at idx 4 with pred 0 -> 0.0
    preds = [1, 0, 1, 1, 0]
    labels = [0, 0, 1, 1, 0]
    groups = ["a", "a", "a", "b", "b"]
    rates, counts, empty = M.wrongful_conviction_rates(preds, labels, groups)
    assert rates == {"a": 0.5, "b": 0.0}
    assert counts == {"a": 3, "b": 2}
    assert empty == 0


def test_wcr_group_without_negatives_is_omitted():
    rates, counts, empty = M.wrongful_conviction_rates(
        [1, 1], [1, 0], ["x", "y"])
    assert "x" not in rates
    assert rates == {"y": 1.0}
    assert empty == 1


class _Split:
    def __init__(self, inputs, labels, n_classes, groups=None):
        self.inputs = inputs
        self.labels = np.asarray(labels)
        self.n_classes = n_classes
        self.groups = groups

    def __len__(self):
        return len(self.labels)


def test_evaluate_known_network():
    # identity logits: predictions equal argmax of inputs
    net = L.Network([L.Linear(2, 2)], (2,))
    L.init_params(net, 0)
    W, b = net.parameters()
    W.data[...] = np.eye(2)
    b.data[...] = 0.0
    x = np.array([[2.0, 0.0], [0.0, 2.0], [3.0, 1.0], [1.0, 3.0]])
    ds = _Split(x, [0, 1, 1, 1], 2, groups=np.array(["g1", "g1", "g2", "g2"]))
    report = M.evaluate(net, ds)
    assert report.accuracy == 0.75  # sample 2 predicted 0, labeled 1
    assert report.f1 == pytest.approx(2 * 2 / (2 * 2 + 0 + 1), abs=1e-12)
    assert report.n == 4
    # g1's only negative (sample 0) predicted 0 -> rate 0; g2 has no negatives
    assert report.wcr == {"g1": 0.0}
    assert report.empty_groups == 1
    assert 0.0 <= report.auc <= 1.0
    parsed = __import__("json").loads(report.to_json())
    assert parsed["accuracy"] == 0.75


def test_evaluate_multiclass_has_no_auc():
    net = L.init_params(
        L.Network([L.Linear(3, 3)], (3,)), 1)
    ds = _Split(np.eye(3), [0, 1, 2], 3)
    report = M.evaluate(net, ds)
    assert report.auc is None


def test_evaluate_empty_dataset_rejected():
    net = L.init_params(L.Network([L.Linear(2, 2)], (2,)), 0)
    with pytest.raises(M.MetricError):
        M.evaluate(net, _Split(np.zeros((0, 2)), [], 2))


def test_predict_logits_batching_invariant():
    net = L.init_params(L.Network([L.Linear(4, 3)], (4,)), 2)
    x = np.random.default_rng(3).normal(size=(7, 4))
    # same batch size is bit-identical; different blocking agrees closely
    np.testing.assert_array_equal(
        M.predict_logits(net, x, batch_size=2),
        M.predict_logits(net, x, batch_size=2))
    np.testing.assert_allclose(
        M.predict_logits(net, x, batch_size=2),
        M.predict_logits(net, x, batch_size=512), atol=1e-12)
