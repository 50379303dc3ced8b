"""Contextual decomposition: a two-component forward pass through a network.

For a chosen feature group, the input splits into beta (the group's pixels)
and gamma (the rest); each layer then propagates the pair so that
beta + gamma always equals the standard activation, and the beta logits act
as the group's importance score. Both components stay on the autodiff graph,
so importance scores can be penalized and minimized like any other loss
term.

Layer rules:
  linear/conv  components pass through the weights separately; the bias is
               shared out elementwise in proportion |w·beta| over
               |w·beta| + |w·gamma|, with units where both vanish sending
               their bias to gamma. The proportional fraction is computed
               with a guarded division (0 where both parts vanish, the
               exact ratio elsewhere) so an identically-zero beta stays
               exactly zero and an identically-zero gamma stays exactly
               zero, unit by unit.
  relu         beta' = relu(beta); gamma' = relu(beta+gamma) - relu(beta).
  maxpool      the argmax of the total activation routes both components
               (ties to the lowest in-window index).
  dropout      identity in eval mode; in train mode one shared pre-scaled
               mask multiplies both components.
  flatten      reshapes both components.

The decomposition stops at the logits; softmax belongs to the loss.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .layers import Conv2D, Dropout, Flatten, Linear, MaxPool2D, Network, ReLU, forward


class FeatureGroup:
    """Boolean membership mask over input features.

    The mask either matches one sample's input shape (shared across the
    batch) or carries a leading batch axis for per-sample groups. Empty and
    full masks are valid and have forced decompositions.
    """

    def __init__(self, mask):
        self.mask = np.asarray(mask, dtype=bool)

    def batched(self, x_shape):
        """Mask as float64 with shape ``x_shape`` (broadcasting over batch)."""
        m = self.mask
        if m.shape == x_shape:
            return m.astype(np.float64)
        if m.shape == x_shape[1:]:
            return np.broadcast_to(m, x_shape).astype(np.float64)
        raise ad.ShapeError(
            f"group mask shape {m.shape} matches neither {x_shape} nor {x_shape[1:]}")


class CDState:
    """The (beta, gamma) component pair of one activation."""

    __slots__ = ("beta", "gamma")

    def __init__(self, beta, gamma):
        self.beta = beta
        self.gamma = gamma

    def total(self):
        return self.beta + self.gamma


def input_split(x, group: FeatureGroup) -> CDState:
    """beta0 = mask * x, gamma0 = (1 - mask) * x; their sum is x exactly."""
    x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    m = group.batched(x.shape)
    return CDState(x * m, x * (1.0 - m))


def _split_bias(bias, beta_lin, gamma_lin):
    """Share the bias between components in proportion to their magnitudes."""
    abs_b = beta_lin.abs()
    abs_g = gamma_lin.abs()
    denom = abs_b + abs_g
    alive = (denom.data > 0).astype(np.float64)
    frac = (abs_b / (denom + (1.0 - alive))) * alive
    b_beta = bias * frac
    return b_beta, bias - b_beta


def cd_layer(layer, state: CDState, mode="eval", dropout_mask=None) -> CDState:
    """Propagate a component pair through one layer (rules in module docstring)."""
    beta, gamma = state.beta, state.gamma
    if isinstance(layer, Linear):
        beta_lin = beta @ layer.w
        gamma_lin = gamma @ layer.w
        b_beta, b_gamma = _split_bias(layer.b, beta_lin, gamma_lin)
        return CDState(beta_lin + b_beta, gamma_lin + b_gamma)
    if isinstance(layer, Conv2D):
        beta_lin = ad.conv2d(beta, layer.w)
        gamma_lin = ad.conv2d(gamma, layer.w)
        bias = layer.b.reshape((1, layer.c_out, 1, 1))
        b_beta, b_gamma = _split_bias(bias, beta_lin, gamma_lin)
        return CDState(beta_lin + b_beta, gamma_lin + b_gamma)
    if isinstance(layer, ReLU):
        beta_act = ad.relu(beta)
        return CDState(beta_act, ad.relu(beta + gamma) - beta_act)
    if isinstance(layer, MaxPool2D):
        idx = ad.maxpool2d_indices(beta.data + gamma.data, layer.k)
        return CDState(ad.pool_take(beta, idx, layer.k),
                       ad.pool_take(gamma, idx, layer.k))
    if isinstance(layer, Dropout):
        if mode == "eval":
            return state
        if dropout_mask is None:
            raise ValueError("train-mode dropout needs a sampled mask")
        return CDState(beta * dropout_mask, gamma * dropout_mask)
    if isinstance(layer, Flatten):
        shape = (beta.shape[0], -1)
        return CDState(beta.reshape(shape), gamma.reshape(shape))
    raise ad.UnsupportedOpError(f"unsupported layer kind: {type(layer).__name__}")


def cd_run(net: Network, state: CDState, start=0, stop=None, mode="eval",
           dropout_masks=None) -> CDState:
    """Apply layers ``start`` up to (not including) ``stop`` to a component pair."""
    if stop is None:
        stop = len(net.layers)
    for i in range(start, stop):
        mask = dropout_masks.get(i) if (dropout_masks and mode == "train") else None
        state = cd_layer(net.layers[i], state, mode=mode, dropout_mask=mask)
    return state


def cd_forward(net: Network, x, group: FeatureGroup, mode="eval", dropout_masks=None):
    """Decomposed logits (beta_logits, gamma_logits) for one feature group.

    The pair sums to the standard logits. All-true and all-false masks take
    the identity shortcuts forced by the decomposition's endpoint rules
    (beta = logits / gamma = 0 and vice versa), which keeps the endpoint
    equalities exact for every input, including degenerate all-zero ones.
    """
    x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    mask = group.mask
    if mask.all() or not mask.any():
        logits = forward(net, x, mode=mode, dropout_masks=dropout_masks)
        zeros = ad.Tensor(np.zeros(logits.shape))
        return (logits, zeros) if mask.all() else (zeros, logits)
    state = cd_run(net, input_split(x, group), mode=mode, dropout_masks=dropout_masks)
    return state.beta, state.gamma


def cd_frozen_prefix(net: Network, x, group: FeatureGroup, mode="eval",
                     dropout_masks=None) -> CDState:
    """Component pair at the frozen/trainable boundary, free of the graph.

    Computed without gradient tracking so callers can cache it per
    (sample, group) and resume with ``cd_run(net, state, start=net.frozen_prefix)``;
    the resumed logits match the full pass. With ``frozen_prefix == 0`` this
    is just the input split.
    """
    with ad.no_grad():
        state = input_split(x, group)
        state = cd_run(net, state, start=0, stop=net.frozen_prefix, mode=mode,
                       dropout_masks=dropout_masks)
    return CDState(ad.Tensor(state.beta.data), ad.Tensor(state.gamma.data))


def cd_logits_via_cache(net: Network, cached: CDState, mode="eval", dropout_masks=None):
    """Resume a cached boundary state through the trainable suffix."""
    state = cd_run(net, cached, start=net.frozen_prefix, mode=mode,
                   dropout_masks=dropout_masks)
    return state.beta, state.gamma
