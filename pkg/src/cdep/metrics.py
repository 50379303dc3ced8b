"""Evaluation metrics: accuracy, rank AUC, F1, and group-conditional WCR.

WCR (wrongful conviction rate) for a group is FP / (FP + TN) among that
group's truly-negative samples under argmax decisions: the fraction of
defendants flagged high risk who did not reoffend.
"""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad
from .layers import forward


class MetricError(ValueError):
    """Raised when a metric is undefined for the given labels."""


class EvalReport:
    """Metric bundle for one dataset split."""

    def __init__(self, accuracy, auc, f1, wcr=None, group_counts=None,
                 empty_groups=0, n=0):
        self.accuracy = accuracy
        self.auc = auc
        self.f1 = f1
        self.wcr = wcr or {}
        self.group_counts = group_counts or {}
        self.empty_groups = empty_groups
        self.n = n

    def to_dict(self):
        return {"accuracy": self.accuracy, "auc": self.auc, "f1": self.f1,
                "wcr": self.wcr, "group_counts": self.group_counts,
                "empty_groups": self.empty_groups, "n": self.n}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def rank_auc(scores, labels):
    """Mann-Whitney AUC of positive-class scores, ties counted half.

    Equals the probability that a random positive outranks a random
    negative, computed from the rank sum with average ranks at ties.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: need both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    ranks[order] = np.arange(1, scores.size + 1)
    # average the ranks inside each tied block
    sorted_scores = scores[order]
    block_starts = np.flatnonzero(
        np.concatenate(([True], sorted_scores[1:] != sorted_scores[:-1])))
    block_ends = np.concatenate((block_starts[1:], [scores.size]))
    for s, e in zip(block_starts, block_ends):
        if e - s > 1:
            ranks[order[s:e]] = 0.5 * (s + 1 + e)
    rank_sum = ranks[labels].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def f1_score(predictions, labels, positive_class=1):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    tp = int(((predictions == positive_class) & (labels == positive_class)).sum())
    fp = int(((predictions == positive_class) & (labels != positive_class)).sum())
    fn = int(((predictions != positive_class) & (labels == positive_class)).sum())
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def wrongful_conviction_rates(predictions, labels, groups, positive_class=1):
    """Per-group FP / (FP + TN); groups with no negatives are omitted."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    groups = np.asarray(groups)
    rates, counts, empty = {}, {}, 0
    for g in sorted(set(groups.tolist())):
        sel = groups == g
        counts[str(g)] = int(sel.sum())
        neg = sel & (labels != positive_class)
        if not neg.any():
            empty += 1
            continue
        fp = int((predictions[neg] == positive_class).sum())
        rates[str(g)] = fp / int(neg.sum())
    return rates, counts, empty


def evaluate(net, dataset, positive_class=1, batch_size=512) -> EvalReport:
    """Eval-mode metrics over a dataset; AUC only for binary problems."""
    if len(dataset) == 0:
        raise MetricError("cannot evaluate an empty dataset")
    logits = predict_logits(net, dataset.inputs, batch_size=batch_size)
    predictions = logits.argmax(axis=1)
    labels = dataset.labels
    accuracy = float((predictions == labels).mean())
    auc = None
    if dataset.n_classes == 2:
        probs = _softmax_np(logits)[:, positive_class]
        auc = float(rank_auc(probs, labels == positive_class))
    f1 = float(f1_score(predictions, labels, positive_class))
    wcr, counts, empty = ({}, {}, 0)
    if dataset.groups is not None:
        wcr, counts, empty = wrongful_conviction_rates(
            predictions, labels, dataset.groups, positive_class)
    return EvalReport(accuracy, auc, f1, wcr, counts, empty, n=len(dataset))


def predict_logits(net, inputs, batch_size=512):
    out = []
    with ad.no_grad():
        for i in range(0, inputs.shape[0], batch_size):
            xb = ad.Tensor(inputs[i:i + batch_size])
            out.append(forward(net, xb, mode="eval").data)
    return np.concatenate(out, axis=0)


def _softmax_np(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
