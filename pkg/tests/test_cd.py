"""Contextual decomposition: layer rules, completeness, endpoints, caching."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdep import autodiff as ad
from cdep import cd
from cdep import layers as L


def tiny_dense(seed=0):
    net = L.Network([L.Linear(6, 4), L.ReLU(), L.Linear(4, 3)], (6,))
    return L.init_params(net, seed)


def tiny_cnn(seed=0):
    net = L.Network(
        [L.Conv2D(1, 3, 3), L.ReLU(), L.MaxPool2D(2), L.Flatten(),
         L.Linear(27, 5)], (1, 8, 8))
    return L.init_params(net, seed)


def test_hand_linear_relu_rule():
    # x = [1, 1], mask selects the first feature. W rows map to units
    # [1*b + 2*g, 3*b + 4*g] with bias [1, 1]:
    #   unit 1: |1| / (|1| + |2|) = 1/3 of the bias -> beta 1 + 1/3 = 4/3
    #   unit 2: |3| / (|3| + |4|) = 3/7 of the bias -> beta 3 + 3/7 = 24/7
    lin = L.Linear(2, 2)
    lin.w = ad.Tensor(np.array([[1.0, 3.0], [2.0, 4.0]]), track=True)
    lin.b = ad.Tensor(np.array([1.0, 1.0]), track=True)
    state = cd.input_split(np.array([[1.0, 1.0]]),
                           cd.FeatureGroup(np.array([True, False])))
    out = cd.cd_layer(lin, state)
    np.testing.assert_allclose(out.beta.data, [[4.0 / 3.0, 24.0 / 7.0]])
    np.testing.assert_allclose(out.gamma.data,
                               [[2.0 + 2.0 / 3.0, 4.0 + 4.0 / 7.0]])
    # relu keeps positives untouched
    after = cd.cd_layer(L.ReLU(), out)
    np.testing.assert_allclose(after.beta.data, out.beta.data)


def test_relu_rule_with_negatives():
    state = cd.CDState(ad.Tensor([[2.0, -3.0]]), ad.Tensor([[-1.0, 5.0]]))
    out = cd.cd_layer(L.ReLU(), state)
    np.testing.assert_array_equal(out.beta.data, [[2.0, 0.0]])
    np.testing.assert_array_equal(out.gamma.data, [[-1.0, 2.0]])
    np.testing.assert_array_equal(out.total().data, [[1.0, 2.0]])


def test_maxpool_routes_by_total():
    beta = np.zeros((1, 1, 2, 2))
    gamma = np.zeros((1, 1, 2, 2))
    beta[0, 0] = [[0.9, 1.0], [2.9, 0.0]]
    gamma[0, 0] = [[0.1, 4.0], [0.0, 2.0]]
    # totals [[1.0, 5.0], [2.9, 2.0]]: argmax is position (0, 1)
    out = cd.cd_layer(L.MaxPool2D(2), cd.CDState(ad.Tensor(beta), ad.Tensor(gamma)))
    np.testing.assert_array_equal(out.beta.data, [[[[1.0]]]])
    np.testing.assert_array_equal(out.gamma.data, [[[[4.0]]]])


def test_bias_goes_to_gamma_when_both_parts_vanish():
    lin = L.Linear(2, 2)
    lin.w = ad.Tensor(np.array([[1.0, 0.0], [2.0, 0.0]]), track=True)
    lin.b = ad.Tensor(np.array([5.0, 7.0]), track=True)
    # unit 2 has zero weights, so w.beta = w.gamma = 0 there
    state = cd.input_split(np.array([[1.0, 1.0]]),
                           cd.FeatureGroup(np.array([True, False])))
    out = cd.cd_layer(lin, state)
    assert out.beta.data[0, 1] == 0.0
    assert out.gamma.data[0, 1] == 7.0
    np.testing.assert_allclose(out.total().data, [[1.0 + 2.0 + 5.0, 7.0]])


def test_input_split_partitions_exactly():
    x = np.arange(6.0).reshape(1, 6)
    mask = np.array([True, False, True, False, True, False])
    state = cd.input_split(x, cd.FeatureGroup(mask))
    np.testing.assert_array_equal(state.beta.data + state.gamma.data, x)
    np.testing.assert_array_equal(state.beta.data[0, 1::2], np.zeros(3))


def test_group_mask_shapes():
    g = cd.FeatureGroup(np.ones((1, 2, 2), dtype=bool))
    assert g.batched((5, 1, 2, 2)).shape == (5, 1, 2, 2)
    per_sample = cd.FeatureGroup(np.ones((5, 1, 2, 2), dtype=bool))
    assert per_sample.batched((5, 1, 2, 2)).shape == (5, 1, 2, 2)
    with pytest.raises(ad.ShapeError):
        cd.FeatureGroup(np.ones((3, 3), dtype=bool)).batched((5, 1, 2, 2))


def test_completeness_dense():
    net = tiny_dense(3)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(7, 6))
    mask = rng.random(6) < 0.5
    mask[0] = True  # keep the group non-empty
    beta, gamma = cd.cd_forward(net, x, cd.FeatureGroup(mask))
    logits = L.forward(net, ad.Tensor(x))
    assert np.abs(beta.data + gamma.data - logits.data).max() <= 1e-8


def test_completeness_cnn_per_sample_masks():
    net = tiny_cnn(5)
    rng = np.random.default_rng(6)
    x = rng.random((4, 1, 8, 8))
    masks = rng.random((4, 1, 8, 8)) < 0.3
    masks[:, :, 0, 0] = True
    beta, gamma = cd.cd_forward(net, x, cd.FeatureGroup(masks))
    logits = L.forward(net, ad.Tensor(x))
    assert np.abs(beta.data + gamma.data - logits.data).max() <= 1e-8


def test_completeness_with_shared_dropout_masks():
    net = L.init_params(L.Network(
        [L.Linear(6, 8), L.ReLU(), L.Dropout(0.5), L.Linear(8, 3)], (6,)), 1)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 6))
    dm = L.sample_dropout_masks(net, 5, rng)
    mask = np.array([True, True, False, False, False, False])
    beta, gamma = cd.cd_forward(net, x, cd.FeatureGroup(mask), mode="train",
                                dropout_masks=dm)
    logits = L.forward(net, ad.Tensor(x), mode="train", dropout_masks=dm)
    assert np.abs(beta.data + gamma.data - logits.data).max() <= 1e-8


def test_empty_and_full_group_endpoints_exact():
    net = tiny_cnn(7)
    x = np.random.default_rng(8).random((2, 1, 8, 8))
    logits = L.forward(net, ad.Tensor(x)).data
    beta, gamma = cd.cd_forward(net, x, cd.FeatureGroup(np.zeros((1, 8, 8), bool)))
    np.testing.assert_array_equal(beta.data, np.zeros_like(logits))
    np.testing.assert_array_equal(gamma.data, logits)
    beta, gamma = cd.cd_forward(net, x, cd.FeatureGroup(np.ones((1, 8, 8), bool)))
    np.testing.assert_array_equal(beta.data, logits)
    np.testing.assert_array_equal(gamma.data, np.zeros_like(logits))


def test_endpoints_exact_on_all_zero_input():
    net = tiny_dense(9)
    x = np.zeros((3, 6))
    beta, gamma = cd.cd_forward(net, x, cd.FeatureGroup(np.ones(6, bool)))
    logits = L.forward(net, ad.Tensor(x)).data
    np.testing.assert_array_equal(beta.data, logits)
    np.testing.assert_array_equal(gamma.data, np.zeros_like(logits))


def test_zero_input_sends_bias_to_gamma_for_partial_group():
    # with x = 0 both linear parts vanish, so every bias goes to gamma
    net = tiny_dense(10)
    x = np.zeros((2, 6))
    mask = np.array([True, False, True, False, False, False])
    beta, gamma = cd.cd_forward(net, x, cd.FeatureGroup(mask))
    np.testing.assert_array_equal(beta.data, np.zeros_like(beta.data))
    logits = L.forward(net, ad.Tensor(x)).data
    np.testing.assert_allclose(gamma.data, logits)


def test_beta_is_differentiable():
    net = tiny_dense(11)
    x = np.random.default_rng(12).normal(size=(4, 6))
    mask = np.array([True, True, False, False, False, False])
    beta, _ = cd.cd_forward(net, x, cd.FeatureGroup(mask))
    loss = beta.abs().sum()
    grads = ad.backward(loss, wrt=net.parameters())
    assert any(np.abs(g.data).max() > 0 for g in grads.values())


def test_frozen_prefix_cache_matches_direct():
    net = L.init_params(L.Network(
        [L.Conv2D(1, 3, 3), L.ReLU(), L.MaxPool2D(2), L.Flatten(),
         L.Linear(27, 8), L.ReLU(), L.Linear(8, 5)], (1, 8, 8),
        frozen_prefix=4), 13)
    rng = np.random.default_rng(14)
    x = rng.random((3, 1, 8, 8))
    masks = rng.random((3, 1, 8, 8)) < 0.4
    masks[:, :, 1, 1] = True
    group = cd.FeatureGroup(masks)
    direct_beta, direct_gamma = cd.cd_forward(net, x, group)
    cached = cd.cd_frozen_prefix(net, x, group)
    beta, gamma = cd.cd_logits_via_cache(net, cached)
    np.testing.assert_array_equal(beta.data, direct_beta.data)
    np.testing.assert_array_equal(gamma.data, direct_gamma.data)
    # the cache holds fresh leaves, so backward through the suffix works
    grads = ad.backward(beta.abs().sum(), wrt=net.parameters())
    assert len(grads) == len(net.parameters())


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1),
       st.integers(min_value=1, max_value=5))
def test_completeness_property(seed, batch):
    rng = np.random.default_rng(seed)
    net = tiny_dense(seed % 1000)
    x = rng.normal(size=(batch, 6)) * rng.uniform(0.1, 3)
    mask = rng.random(6) < rng.uniform(0.1, 0.9)
    beta, gamma = cd.cd_forward(net, x, cd.FeatureGroup(mask))
    logits = L.forward(net, ad.Tensor(x))
    assert np.abs(beta.data + gamma.data - logits.data).max() <= 1e-8
