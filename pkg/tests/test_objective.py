"""Objectives: cross-entropy, explanation targets, folding, degenerate lambda."""

import math

import numpy as np
import pytest

from cdep import autodiff as ad
from cdep import layers as L
from cdep import objective as obj
from cdep.cd import FeatureGroup


def dense_net(seed=0, n_in=6, n_out=3):
    net = L.Network([L.Linear(n_in, 5), L.ReLU(), L.Linear(5, n_out)], (n_in,))
    return L.init_params(net, seed)


def test_cross_entropy_hand_values():
    # two equal logits: loss is log 2 exactly
    loss = obj.cross_entropy(ad.Tensor([[0.0, 0.0]]), [0])
    assert abs(loss.item() - math.log(2.0)) <= 1e-12
    # logits [1, 0], true class 0: loss = log(1 + e^-1)
    loss = obj.cross_entropy(ad.Tensor([[1.0, 0.0]]), [0])
    assert abs(loss.item() - math.log(1.0 + math.exp(-1.0))) <= 1e-12


def test_cross_entropy_class_weights():
    logits = ad.Tensor([[2.0, 0.0], [0.0, 2.0]])
    labels = [0, 1]
    unweighted = obj.cross_entropy(logits, labels)
    weighted = obj.cross_entropy(logits, labels, class_weights=[1.0, 1.0])
    assert abs(unweighted.item() - weighted.item()) <= 1e-12
    # weight one class to zero: only the other sample contributes
    only_first = obj.cross_entropy(logits, labels, class_weights=[1.0, 0.0])
    alone = obj.cross_entropy(ad.Tensor([[2.0, 0.0]]), [0])
    assert abs(only_first.item() - alone.item()) <= 1e-12


def test_one_hot():
    np.testing.assert_array_equal(
        obj.one_hot(np.array([1, 0]), 3),
        [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])


def test_lambda_zero_is_bitwise_cross_entropy():
    net = dense_net(1)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 6))
    y = rng.integers(0, 3, size=4)
    targets = [obj.ExplanationTarget(FeatureGroup(np.ones(6, bool)))]
    report = obj.cdep_loss(net, x, y, targets, 0.0)
    plain = obj.cross_entropy(L.forward(net, ad.Tensor(x)), y)
    assert report.total.item() == plain.item()
    assert report.explanation_error.item() == 0.0
    ga = ad.backward(report.total, wrt=net.parameters())
    net2 = dense_net(1)
    gb = ad.backward(obj.cross_entropy(L.forward(net2, ad.Tensor(x)), y),
                     wrt=net2.parameters())
    for pa, pb in zip(net.parameters(), net2.parameters()):
        np.testing.assert_array_equal(ga[pa].data, gb[pb].data)


def test_negative_lambda_rejected():
    net = dense_net(0)
    with pytest.raises(ValueError):
        obj.cdep_loss(net, np.zeros((1, 6)), [0], [], -1.0)


def test_full_group_suppress_equals_mean_l1_of_logits():
    net = dense_net(3)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 6))
    y = rng.integers(0, 3, size=5)
    targets = [obj.ExplanationTarget(FeatureGroup(np.ones(6, bool)))]
    report = obj.cdep_loss(net, x, y, targets, 2.0)
    logits = L.forward(net, ad.Tensor(x)).data
    expected = np.abs(logits).sum() / 5.0
    assert abs(report.explanation_error.item() - expected) <= 1e-12
    assert abs(report.total.item()
               - (report.prediction_error.item() + 2.0 * expected)) <= 1e-12


def test_softmax_suppress_targets_uniform():
    net = dense_net(5)
    x = np.random.default_rng(6).normal(size=(3, 6))
    targets = [obj.ExplanationTarget(FeatureGroup(np.ones(6, bool)))]
    err = obj.explanation_error(net, x, targets, score_mode="softmax")
    logits = L.forward(net, ad.Tensor(x)).data
    p = np.exp(logits - logits.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    expected = np.abs(p - 1.0 / 3.0).sum() / 3.0
    assert abs(err.item() - expected) <= 1e-12


def test_boost_hinge_at_zero_network():
    net = dense_net(7)
    for p in net.parameters():
        p.data[...] = 0.0
    # beta is identically zero, so each class contributes the full margin
    t = obj.make_boost_target([0, 2], 0.4, 6)
    err = obj.explanation_error(net, np.ones((2, 6)), [t])
    n_classes = 3
    assert abs(err.item() - 0.4 * n_classes) <= 1e-12


def test_class_scope_limits_columns():
    net = dense_net(8)
    rng = np.random.default_rng(9)
    x = rng.normal(size=(4, 6))
    mask = np.array([True, True, False, False, False, False])
    full = [obj.ExplanationTarget(FeatureGroup(mask))]
    scoped = [obj.ExplanationTarget(FeatureGroup(mask), classes=[1])]
    from cdep.cd import cd_forward

    beta, _ = cd_forward(net, x, FeatureGroup(mask))
    expected_full = np.abs(beta.data).sum() / 4.0
    expected_scoped = np.abs(beta.data[:, 1]).sum() / 4.0
    assert abs(obj.explanation_error(net, x, full).item() - expected_full) <= 1e-12
    assert abs(obj.explanation_error(net, x, scoped).item() - expected_scoped) <= 1e-12


def test_match_mode_needs_values_and_checks_length():
    with pytest.raises(ValueError):
        obj.ExplanationTarget(FeatureGroup(np.ones(6, bool)), mode="match")
    net = dense_net(10)
    bad = [obj.ExplanationTarget(FeatureGroup(np.ones(6, bool)), mode="match",
                                 values=np.ones(4))]
    with pytest.raises(ad.ShapeError):
        obj.explanation_error(net, np.ones((1, 6)), bad)


def test_unknown_mode_and_margin_validation():
    g = FeatureGroup(np.ones(6, bool))
    with pytest.raises(ValueError):
        obj.ExplanationTarget(g, mode="emphasize")
    with pytest.raises(ValueError):
        obj.ExplanationTarget(g, mode="boost", margin=0.0)


def test_fold_equivalence_exact():
    net = dense_net(11)
    rng = np.random.default_rng(12)
    x = rng.normal(size=(3, 6))
    m1 = np.array([True, False, False, False, False, False])
    m2 = np.array([False, False, True, False, False, False])
    separate = 0.0
    for m in (m1, m2):
        separate += obj.explanation_error(
            net, x, [obj.ExplanationTarget(FeatureGroup(m))]).item()
    together = obj.explanation_error(
        net, x, [obj.ExplanationTarget(FeatureGroup(m1)),
                 obj.ExplanationTarget(FeatureGroup(m2))]).item()
    # each single-target error is mean over (batch * 1); folding averages
    # over (batch * 2), so the sum halves
    assert abs(together - separate / 2.0) <= 1e-12


def test_fold_keys_separate_modes():
    t1 = obj.ExplanationTarget(FeatureGroup(np.ones(6, bool)))
    t2 = obj.ExplanationTarget(FeatureGroup(np.ones(6, bool)), mode="boost",
                               margin=0.5)
    assert t1._fold_key() != t2._fold_key()
    t3 = obj.ExplanationTarget(FeatureGroup(np.zeros(6, bool)))
    assert t1._fold_key() == t3._fold_key()


def test_empty_mask_samples_contribute_zero():
    net = dense_net(13)
    rng = np.random.default_rng(14)
    x = rng.normal(size=(4, 6))
    masks = np.zeros((4, 6), dtype=bool)
    masks[0, 0] = True  # only the first sample is annotated
    mixed = obj.explanation_error(net, x, obj.make_suppress_targets(masks))
    solo_masks = np.zeros((1, 6), dtype=bool)
    solo_masks[0, 0] = True
    solo = obj.explanation_error(net, x[:1], obj.make_suppress_targets(solo_masks))
    # same absolute error mass, averaged over 4 instead of 1 samples
    assert abs(mixed.item() - solo.item() / 4.0) <= 1e-12


def test_sample_pixel_targets_shape_and_determinism():
    dist = np.zeros((6, 6))
    dist[2:4, 2:4] = 0.25
    t1 = obj.sample_pixel_targets(dist, 5, np.random.default_rng(0), channels=3)
    t2 = obj.sample_pixel_targets(dist, 5, np.random.default_rng(0), channels=3)
    assert len(t1) == 5
    for a, b in zip(t1, t2):
        np.testing.assert_array_equal(a.group.mask, b.group.mask)
        assert a.group.mask.shape == (3, 6, 6)
        pixels = a.group.mask.sum()
        assert pixels == 3  # one location across all channels
        assert a.group.mask.any(axis=0)[2:4, 2:4].sum() == 1
    with pytest.raises(ValueError):
        obj.sample_pixel_targets(np.zeros((6, 6)), 3, np.random.default_rng(0))
    with pytest.raises(ad.ShapeError):
        obj.sample_pixel_targets(np.ones(6) / 6.0, 3, np.random.default_rng(0))


def test_pixel_fold_single_pass_equivalence():
    # k pixel groups produce the same value whether folded or run one by one
    net = L.init_params(L.Network(
        [L.Flatten(), L.Linear(12, 6), L.ReLU(), L.Linear(6, 3)], (3, 2, 2)), 15)
    rng = np.random.default_rng(16)
    x = rng.random((2, 3, 2, 2))
    dist = np.full((2, 2), 0.25)
    targets = obj.sample_pixel_targets(dist, 3, np.random.default_rng(1))
    folded = obj.explanation_error(net, x, targets).item()
    single = sum(obj.explanation_error(net, x, [t]).item() for t in targets)
    assert abs(folded - single / 3.0) <= 1e-12


def test_loss_report_floats():
    net = dense_net(17)
    report = obj.cdep_loss(net, np.ones((2, 6)), [0, 1],
                           obj.make_suppress_targets(np.ones((2, 6), bool)), 1.5)
    vals = report.floats()
    assert set(vals) == {"pred_err", "expl_err", "total"}
    assert abs(vals["total"] - (vals["pred_err"] + 1.5 * vals["expl_err"])) <= 1e-12
