"""Training objectives: cross-entropy plus the decomposition penalty.

The augmented loss is

    total = prediction_error + lambda_ * explanation_error

where the prediction error is (optionally class-weighted) cross-entropy
and the explanation error measures, in L1, how far the beta logits of
declared feature groups sit from their desired importance. Three target
modes cover the usual kinds of prior knowledge:

  suppress  the group should not matter: target importance 0. In raw-logit
            scoring the error is |beta| summed over classes; in softmax
            scoring it is the L1 gap between softmax(beta) and uniform,
            since a softmax can never reach an all-zero vector.
  boost     the group must matter: hinge sum_c max(0, margin - |beta_c|)
            on the raw beta logits, zero once every class importance
            clears the margin.
  match     beta (or its softmax) should equal a given per-class vector.

The explanation error is averaged over batch size and group count so that
lambda_ keeps one scale across batch sizes; the constant below names that
choice for run manifests.

Groups that share a penalty configuration are folded into one decomposition
pass by stacking them along the batch axis, so k single-pixel groups cost
one pass over a k-times-larger batch instead of k passes.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .cd import FeatureGroup, cd_forward
from .layers import forward

EXPL_NORMALIZATION = "mean over batch size and group count"
CE_NORMALIZATION = "weighted mean over batch"


class ExplanationTarget:
    """One feature group plus its desired importance.

    classes limits the penalty to specific logit columns (None means all).
    """

    def __init__(self, group: FeatureGroup, mode="suppress", margin=1.0,
                 values=None, classes=None):
        if mode not in ("suppress", "boost", "match"):
            raise ValueError(f"unknown target mode: {mode!r}")
        if mode == "boost" and margin <= 0:
            raise ValueError(f"boost margin must be positive, got {margin}")
        if mode == "match":
            if values is None:
                raise ValueError("match mode needs a target vector")
            values = np.asarray(values, dtype=np.float64)
        self.group = group
        self.mode = mode
        self.margin = float(margin)
        self.values = values
        self.classes = None if classes is None else tuple(int(c) for c in classes)

    def _fold_key(self):
        vals = None if self.values is None else tuple(self.values.ravel())
        return (self.mode, self.margin, vals, self.classes)


class LossReport:
    """The three scalars of one objective evaluation, still on the graph."""

    __slots__ = ("prediction_error", "explanation_error", "total")

    def __init__(self, prediction_error, explanation_error, total):
        self.prediction_error = prediction_error
        self.explanation_error = explanation_error
        self.total = total

    def floats(self):
        return {"pred_err": self.prediction_error.item(),
                "expl_err": self.explanation_error.item(),
                "total": self.total.item()}


def one_hot(labels, n_classes):
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(logits, labels, class_weights=None):
    """Mean negative log-likelihood; with class weights, the weighted mean."""
    logp = ad.log_softmax(logits)
    picked = (logp * one_hot(labels, logits.shape[-1])).sum(axis=-1)
    if class_weights is None:
        return -picked.mean()
    w = np.asarray(class_weights, dtype=np.float64)[np.asarray(labels)]
    return -((picked * w).sum() / float(w.sum()))


def _column_mask(classes, n_classes):
    m = np.zeros(n_classes)
    m[list(classes)] = 1.0
    return m


def _target_error(beta, target: ExplanationTarget, score_mode):
    """Summed L1 error of one folded group batch against its target."""
    n_classes = beta.shape[-1]
    if target.mode == "boost":
        err = ad.relu(target.margin - beta.abs())
    else:
        if score_mode == "softmax":
            score = ad.softmax(beta)
            desired = (1.0 / n_classes) if target.mode == "suppress" else target.values
        elif score_mode == "logit":
            score = beta
            desired = 0.0 if target.mode == "suppress" else target.values
        else:
            raise ValueError(f"unknown score_mode: {score_mode!r}")
        if target.mode == "match" and target.values.shape != (n_classes,):
            raise ad.ShapeError(
                f"match target length {target.values.shape} != ({n_classes},)")
        err = (score - desired).abs()
    if target.classes is not None:
        err = err * _column_mask(target.classes, n_classes)
    return err.sum()


def explanation_error(net, x, targets, score_mode="logit", mode="eval",
                      dropout_masks=None):
    """Mean L1 gap between group importances and their targets.

    Targets sharing a penalty configuration run as one stacked
    decomposition pass. Returns a scalar on the graph; an empty target
    list gives a constant zero.
    """
    if not targets:
        return ad.Tensor(0.0)
    x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    batch = x.shape[0]
    folds = {}
    for t in targets:
        folds.setdefault(t._fold_key(), []).append(t)
    acc = None
    for ts in folds.values():
        masks = [t.group.batched(x.shape) for t in ts]
        if len(ts) == 1:
            big_x, big_mask = x, masks[0]
            dm = dropout_masks
        else:
            big_x = ad.Tensor(np.concatenate([x.data] * len(ts), axis=0))
            big_mask = np.concatenate(masks, axis=0)
            dm = None if dropout_masks is None else {
                i: np.concatenate([m] * len(ts), axis=0)
                for i, m in dropout_masks.items()}
        beta, _ = cd_forward(net, big_x, FeatureGroup(big_mask.astype(bool)),
                             mode=mode, dropout_masks=dm)
        err = _target_error(beta, ts[0], score_mode)
        acc = err if acc is None else acc + err
    return acc / float(batch * len(targets))


def cdep_loss(net, x, labels, targets, lambda_, score_mode="logit",
              class_weights=None, mode="eval", dropout_masks=None) -> LossReport:
    """Cross-entropy plus lambda_ times the explanation error.

    lambda_ = 0 skips the decomposition entirely, so the loss, its graph,
    and the resulting updates are bit-identical to plain cross-entropy
    training.
    """
    if lambda_ < 0:
        raise ValueError(f"lambda_ must be nonnegative, got {lambda_}")
    x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    logits = forward(net, x, mode=mode, dropout_masks=dropout_masks)
    pred = cross_entropy(logits, labels, class_weights=class_weights)
    if lambda_ == 0:
        return LossReport(pred, ad.Tensor(0.0), pred)
    expl = explanation_error(net, x, targets, score_mode=score_mode,
                             mode=mode, dropout_masks=dropout_masks)
    return LossReport(pred, expl, pred + lambda_ * expl)


def make_suppress_targets(masks):
    """Per-sample masks (batch leading axis) as one suppress-mode target.

    Samples whose mask is empty contribute exactly zero explanation error,
    so a batch may freely mix annotated and unannotated samples.
    """
    return [ExplanationTarget(FeatureGroup(masks), mode="suppress")]


def sample_pixel_targets(pixel_distribution, k, rng, channels=3):
    """k single-pixel suppress groups drawn from a spatial distribution.

    Each group spans all color channels at one sampled location. Sampling
    is with replacement, so a point-mass distribution puts all k groups on
    the same pixel.
    """
    dist = np.asarray(pixel_distribution, dtype=np.float64)
    if dist.ndim != 2:
        raise ad.ShapeError(f"pixel distribution must be 2-d, got {dist.shape}")
    total = dist.sum()
    if total <= 0:
        raise ValueError("pixel distribution is all zero")
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    flat = (dist / total).ravel()
    picks = rng.choice(flat.size, size=int(k), p=flat)
    targets = []
    for p in picks:
        r, c = divmod(int(p), dist.shape[1])
        mask = np.zeros((channels,) + dist.shape, dtype=bool)
        mask[:, r, c] = True
        targets.append(ExplanationTarget(FeatureGroup(mask), mode="suppress"))
    return targets


def make_boost_target(columns, margin, n_features):
    """Boost-mode target over a set of input feature columns."""
    columns = list(columns)
    if not columns:
        raise ValueError("boost target needs at least one feature column")
    mask = np.zeros(n_features, dtype=bool)
    mask[columns] = True
    return ExplanationTarget(FeatureGroup(mask), mode="boost", margin=margin)
