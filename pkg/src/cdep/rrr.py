"""Input-gradient penalty baseline (gradient regularization).

The penalty drives log-probability input gradients toward zero wherever an
annotation mask says the input should not matter:

    total = cross_entropy + lambda_ * sum_i || mask_i * d/dx_i sum_c log p_c ||^2

Optimizing it needs the gradient of a gradient, so the input-gradient pass
runs in graph mode and the method only supports layer kinds whose backward
rules are themselves differentiable: Linear, ReLU, Dropout, Flatten.
Networks with convolution or pooling layers are rejected up front.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .layers import Conv2D, Dropout, Flatten, Linear, MaxPool2D, ReLU, forward
from .objective import LossReport, cross_entropy

_GRAPH_SAFE = (Linear, ReLU, Dropout, Flatten)


class AnnotationMask:
    """Boolean mask over input features; true marks should-be-irrelevant ones."""

    def __init__(self, mask):
        self.mask = np.asarray(mask, dtype=bool)

    def batched(self, x_shape):
        m = self.mask
        if m.shape == x_shape:
            return m.astype(np.float64)
        if m.shape == x_shape[1:]:
            return np.broadcast_to(m, x_shape).astype(np.float64)
        raise ad.ShapeError(
            f"annotation mask shape {m.shape} matches neither {x_shape} nor {x_shape[1:]}")


def check_rrr_support(net):
    for layer in net.layers:
        if not isinstance(layer, _GRAPH_SAFE):
            raise ad.UnsupportedOpError(
                f"gradient penalty supports dense nets only; found {type(layer).__name__}")


def input_gradient(net, x, mode="eval", dropout_masks=None):
    """d/dx of sum_c log softmax(g(x))_c as a graph-mode tensor."""
    xt = ad.Tensor(x.data if isinstance(x, ad.Tensor) else x, track=True)
    logits = forward(net, xt, mode=mode, dropout_masks=dropout_masks)
    logp_sum = ad.log_softmax(logits).sum()
    return ad.backward_as_graph(logp_sum, wrt=[xt])[xt]


def rrr_loss(net, x, labels, masks: AnnotationMask, lambda_, class_weights=None,
             mode="train", dropout_masks=None) -> LossReport:
    """Cross-entropy plus the masked squared input-gradient penalty.

    lambda_ = 0 skips the double-backward pass entirely and reduces to
    plain cross-entropy bit-exactly. The penalty is averaged over the
    batch to match the prediction term's scale.
    """
    if lambda_ < 0:
        raise ValueError(f"lambda_ must be nonnegative, got {lambda_}")
    check_rrr_support(net)
    xt = ad.Tensor(x.data if isinstance(x, ad.Tensor) else x, track=True)
    logits = forward(net, xt, mode=mode, dropout_masks=dropout_masks)
    pred = cross_entropy(logits, labels, class_weights=class_weights)
    m = masks.batched(xt.shape)
    if lambda_ == 0 or not m.any():
        return LossReport(pred, ad.Tensor(0.0), pred)
    logp_sum = ad.log_softmax(logits).sum()
    gx = ad.backward_as_graph(logp_sum, wrt=[xt])[xt]
    masked = gx * m
    expl = (masked * masked).sum() / float(xt.shape[0])
    return LossReport(pred, expl, pred + lambda_ * expl)
