"""Training objectives and evaluation metrics.

The deviation loss drives the per-segment features apart: it min-max
normalizes the six pairwise Euclidean distances, then penalizes a small
standard deviation (population form, divide by 6). Joint objective is
cross-entropy plus a weighted deviation term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value

PAIR_ORDER = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


@dataclass
class DeLossConfig:
    epsilon: float = 1e-12  # degenerate-range guard
    normalize: bool = True  # False: std over raw distances (experimental)


@dataclass
class LossBreakdown:
    ce: float
    de: float
    total: float
    tradeoff_lambda: float


def pairwise_distances(features: list[Value]) -> Value:
    """Euclidean distances for pairs (0,1),(0,2),(0,3),(1,2),(1,3),(2,3)."""
    dists = [ad.l2norm(ad.sub(features[i], features[j])) for i, j in PAIR_ORDER]
    return ad.stack_scalars(dists)


def deviation_loss(features: list[Value], cfg: DeLossConfig | None = None) -> Value:
    """1 - population std of the min-max normalized pairwise distances.

    When the distance range collapses below epsilon the normalized distances
    are defined as 0, so the loss is the constant 1 and no gradient flows
    (min/max selections otherwise carry subgradients).
    """
    cfg = cfg or DeLossConfig()
    d = pairwise_distances(features)
    if cfg.normalize:
        span = ad.sub(ad.vmax(d), ad.vmin(d))
        if span.item() < cfg.epsilon:
            return Value(np.array([1.0]))
        centered = ad.sub(d, _splat(ad.vmean(d), 6))
        dbar = ad.div_by(centered, span)
    else:
        dbar = d
    mean = _splat(ad.vmean(dbar), 6)
    var = ad.vmean(ad.mul(ad.sub(dbar, mean), ad.sub(dbar, mean)))
    if var.item() <= 0.0:
        return Value(np.array([1.0]))
    return ad.sub(Value(np.array([1.0])), ad.sqrt(var))


def _splat(scalar: Value, n: int) -> Value:
    """Repeat a single-element Value into a length-n vector (for vector ops)."""
    ones = Value(np.ones(n))
    return ad.scale_by(ones, scalar)


def cross_entropy(logits: Value, label: int) -> Value:
    """-log softmax(logits)[label], in stable log-sum-exp form."""
    k = logits.shape[0]
    if not 0 <= label < k:
        raise ValueError(f"label {label} out of range for {k} classes")
    return ad.sub(ad.logsumexp(logits), ad.pick(logits, label))


def total_loss(logits: Value, label: int, features: list[Value], tradeoff_lambda: float,
               cfg: DeLossConfig | None = None) -> tuple[Value, LossBreakdown]:
    """Cross-entropy plus lambda times the deviation loss."""
    if tradeoff_lambda < 0:
        raise ValueError("tradeoff_lambda must be >= 0")
    ce = cross_entropy(logits, label)
    de = deviation_loss(features, cfg)
    if tradeoff_lambda == 0.0:
        total = ce  # exact equality contract for the ablation
    else:
        total = ad.add(ce, ad.scale(de, tradeoff_lambda))
    breakdown = LossBreakdown(ce=ce.item(), de=de.item(), total=total.item(),
                              tradeoff_lambda=tradeoff_lambda)
    return total, breakdown


# ---------------------------------------------------------------------------
# metrics

def compute_metrics(preds, truth, num_classes: int) -> dict:
    """Accuracy, per-class precision/recall/F1, macro F1, confusion matrix.

    Confusion rows index truth, columns prediction. A class with undefined
    precision or recall (no support in the relevant margin) contributes an F1
    of 0 to the macro average.
    """
    preds = np.asarray(preds, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if preds.size == 0 or preds.shape != truth.shape:
        raise ValueError("predictions and truth must be equal-length and non-empty")
    confusion = np.zeros((num_classes, num_classes), dtype=int)
    for t, p in zip(truth, preds):
        confusion[t, p] += 1
    accuracy = float(np.trace(confusion)) / float(confusion.sum())
    per_class = {"precision": [], "recall": [], "f1": []}
    for i in range(num_classes):
        tp = float(confusion[i, i])
        fp = float(confusion[:, i].sum() - tp)
        fn = float(confusion[i, :].sum() - tp)
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        per_class["precision"].append(precision)
        per_class["recall"].append(recall)
        per_class["f1"].append(f1)
    macro_f1 = float(np.mean(per_class["f1"]))
    return {
        "accuracy": accuracy,
        "macro_f1": macro_f1,
        "confusion": confusion.tolist(),
        "per_class": per_class,
    }
