"""
Evaluation metrics for sampled segmentations and the two pixel losses of the autoencoder objective. Distances between
masks are 1 - IoU; two empty masks count as a perfect match (IoU = Dice = 1).
"""
import math

from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
import torch

from more_itertools import ncycles
from scipy.optimize import linear_sum_assignment

from .errors import InvalidInputError

SOFT_DICE_THRESHOLDS = (0.1, 0.3, 0.5, 0.7, 0.9)
DICE_EPS = 1e-6
BCE_CLAMP = 1e-7


# region Helpers


def _binary(value):
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    return np.asarray(value) >= 0.5


def _check_pair(a, b):
    if a.shape != b.shape:
        raise InvalidInputError("shape mismatch: {} vs {}".format(list(a.shape), list(b.shape)))


def _stack(masks, name):
    masks = [_binary(m) for m in masks]
    if not masks:
        raise InvalidInputError("{} must not be empty".format(name))
    shape = masks[0].shape
    for m in masks:
        if m.shape != shape:
            raise InvalidInputError("{} have inconsistent shapes: {} vs {}".format(name, list(shape), list(m.shape)))
    return np.stack(masks).reshape(len(masks), -1)


def pairwise_iou(a, b):
    """
    IoU between every row of a and every row of b.
    :param a: bool array [N, P]
    :param b: bool array [M, P]
    :return: float64 array [N, M]
    """
    a, b = a.astype(np.float64), b.astype(np.float64)
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 1.0)


# endregion

# region Overlap metrics


def iou(a, b):
    a, b = _binary(a), _binary(b)
    _check_pair(a, b)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def dice(a, b):
    a, b = _binary(a), _binary(b)
    _check_pair(a, b)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def ged(samples, annotations):
    """
    Squared generalized energy distance 2 E[d(S, Y)] - E[d(S, S')] - E[d(Y, Y')] with d = 1 - IoU. Expectations run
    over all ordered pairs, identical indices included.
    """
    s, y = _stack(samples, "samples"), _stack(annotations, "annotations")
    if s.shape[1] != y.shape[1]:
        raise InvalidInputError("samples and annotations differ in size")
    cross = (1.0 - pairwise_iou(s, y)).mean()
    within_s = (1.0 - pairwise_iou(s, s)).mean()
    within_y = (1.0 - pairwise_iou(y, y)).mean()
    return max(0.0, float(2.0 * cross - within_s - within_y))


def hm_iou(samples, annotations):
    """
    Hungarian-matched IoU. The A annotations are replicated N / A times, then samples and replicas are matched
    one-to-one so that the summed IoU is maximal.
    :return: mean IoU over the matched pairs
    """
    s, y = _stack(samples, "samples"), _stack(annotations, "annotations")
    N, A = s.shape[0], y.shape[0]
    if N % A:
        raise InvalidInputError("annotation count {} must divide sample count {}".format(A, N))
    replicated = np.stack(list(ncycles(y, N // A)))
    scores = pairwise_iou(s, replicated)
    rows, cols = linear_sum_assignment(scores, maximize=True)
    return float(scores[rows, cols].mean())


def soft_dice(samples, annotations, thresholds=SOFT_DICE_THRESHOLDS):
    """Dice between the pixel-wise means of samples and annotations, averaged over binarization thresholds."""
    s, y = _stack(samples, "samples"), _stack(annotations, "annotations")
    if s.shape[1] != y.shape[1]:
        raise InvalidInputError("samples and annotations differ in size")
    prediction, label = s.mean(0), y.mean(0)
    return float(np.mean([dice(prediction >= t, label >= t) for t in thresholds]))


def dice_scores(pred, target):
    """Dice of every row pair of two binary batches [B, ...]; returns float64 [B]."""
    pred, target = _binary(pred), _binary(target)
    _check_pair(pred, target)
    pred, target = pred.reshape(len(pred), -1), target.reshape(len(target), -1)
    inter = np.logical_and(pred, target).sum(1)
    total = pred.sum(1) + target.sum(1)
    return np.where(total > 0, 2.0 * inter / np.maximum(total, 1), 1.0)


def majority_vote(annotations):
    """Pixel-wise majority of the annotations; exact ties count as foreground."""
    return np.mean([_binary(a) for a in annotations], axis=0) >= 0.5


# endregion

# region Losses


def dice_loss(pred, target, eps=DICE_EPS):
    if pred.shape != target.shape:
        raise InvalidInputError("shape mismatch: {} vs {}".format(list(pred.shape), list(target.shape)))
    target = target.to(pred.dtype)
    return 1.0 - (2.0 * (pred * target).sum() + eps) / (pred.sum() + target.sum() + eps)


def bce_loss(pred, target):
    if pred.shape != target.shape:
        raise InvalidInputError("shape mismatch: {} vs {}".format(list(pred.shape), list(target.shape)))
    pred = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    target = target.to(pred.dtype)
    # Written out so that non-finite predictions propagate instead of failing the range check.
    return -(target * torch.log(pred) + (1.0 - target) * torch.log1p(-pred)).mean()


# endregion

# region Reports


@dataclass
class MetricReport:
    ged: Dict[int, float]
    hm_iou: float
    soft_dice: float
    dice: float
    dice_per_class: List[float] = field(default_factory=list)
    extras: Dict[str, object] = field(default_factory=dict)

    def to_dict(self):
        data = {"ged": {str(n): v for n, v in sorted(self.ged.items())}, "hm_iou": self.hm_iou,
                "soft_dice": self.soft_dice, "dice": self.dice}
        if self.dice_per_class:
            data["dice_per_class"] = {str(c): v for c, v in enumerate(self.dice_per_class)}
        data.update(self.extras)
        return data


def score_case(samples, annotations, sample_counts, consensus=None):
    """
    Metrics of one case and class.
    :param samples: N binarized sample masks
    :param annotations: A annotator masks
    :param sample_counts: GED sample counts; counts above N are skipped
    :param consensus: binary consensus mask (majority of the samples when None)
    :return: dict with ged (per count), hm_iou, soft_dice and dice (consensus vs majority vote)
    """
    samples = [_binary(s) for s in samples]
    consensus = _binary(consensus) if consensus is not None else np.mean(samples, axis=0) >= 0.5
    N = len(samples)
    A = len(annotations)
    scores = dict(ged={n: ged(samples[:n], annotations) for n in sample_counts if n <= N},
                  soft_dice=soft_dice(samples, annotations),
                  dice=dice(consensus, majority_vote(annotations)))
    scores["hm_iou"] = hm_iou(samples, annotations) if N % A == 0 else math.nan
    return scores


def summarize(case_scores, num_classes=1):
    """
    Average per-case scores into a MetricReport.
    :param case_scores: list of (class_id, scores) pairs from score_case
    """
    if not case_scores:
        raise InvalidInputError("nothing to summarize")
    counts = sorted({n for _, s in case_scores for n in s["ged"]})
    report_ged = {n: float(np.mean([s["ged"][n] for _, s in case_scores if n in s["ged"]])) for n in counts}
    per_class = []
    for c in range(num_classes):
        values = [s["dice"] for k, s in case_scores if k == c]
        per_class.append(float(np.mean(values)) if values else math.nan)
    return MetricReport(ged=report_ged,
                        hm_iou=float(np.nanmean([s["hm_iou"] for _, s in case_scores])),
                        soft_dice=float(np.mean([s["soft_dice"] for _, s in case_scores])),
                        dice=float(np.nanmean(per_class)),
                        dice_per_class=per_class if num_classes > 1 else [])

# endregion
