"""Patch-level ROC/AUC, recall at a fixed FPR, IoU matching and per-stage statistics."""

from dataclasses import dataclass

import numpy as np


def _xywh(box):
    if hasattr(box, "size") and hasattr(box, "x") and not isinstance(box, tuple):
        return float(box.x), float(box.y), float(box.size), float(box.size)
    if len(box) == 3:
        x, y, s = box
        return float(x), float(y), float(s), float(s)
    x, y, w, h = box
    return float(x), float(y), float(w), float(h)


def iou(a, b):
    """Intersection over union of two axis-aligned boxes.

    Boxes are ``(x, y, size)`` squares, ``(x, y, w, h)`` rectangles or objects
    with ``x``, ``y`` and ``size`` attributes.
    """
    ax, ay, aw, ah = _xywh(a)
    bx, by, bw, bh = _xywh(b)
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return min(1.0, inter / (aw * ah + bw * bh - inter))


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    matches: list  # (detection index, ground-truth index, iou)


def match_detections(detections, ground_truth, iou_threshold=0.7, scores=None):
    """Greedy one-to-one matching in descending score order."""
    if scores is None:
        scores = [getattr(d, "score", 0.0) for d in detections]
    order = sorted(range(len(detections)), key=lambda i: (-scores[i], i))
    used = set()
    matches = []
    for i in order:
        best, best_iou = None, iou_threshold
        for g, gt in enumerate(ground_truth):
            if g in used:
                continue
            v = iou(detections[i], gt)
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = g, v
        if best is not None:
            used.add(best)
            matches.append((i, best, best_iou))
    tp = len(matches)
    return MatchResult(tp, len(detections) - tp, len(ground_truth) - tp, matches)


@dataclass
class RocCurve:
    thresholds: np.ndarray  # descending, first is +inf
    fpr: np.ndarray
    tpr: np.ndarray

    @property
    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    @property
    def auc(self):
        return auc(self)


def roc_points(scores, labels):
    """ROC over every distinct score; a sample is called positive when score >= threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative samples")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order] == 1
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    thresholds = np.r_[np.inf, s[last]]
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    return RocCurve(thresholds, fpr, tpr)


def auc(curve):
    return float(np.trapezoid(curve.tpr, curve.fpr))


def rank_auc(scores, labels):
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    below = np.searchsorted(neg, pos, side="left")
    equal = np.searchsorted(neg, pos, side="right") - below
    return float((below.sum() + 0.5 * equal.sum()) / (len(pos) * len(neg)))


def recall_at_fpr(curve, fpr_target=0.1):
    """TPR at FPR = ``fpr_target``, interpolated linearly between ROC points."""
    k = int(np.searchsorted(curve.fpr, fpr_target, side="right")) - 1
    if k >= len(curve.fpr) - 1 or curve.fpr[k] == fpr_target:
        return float(curve.tpr[k])
    f0, f1 = curve.fpr[k], curve.fpr[k + 1]
    t0, t1 = curve.tpr[k], curve.tpr[k + 1]
    return float(t0 + (fpr_target - f0) * (t1 - t0) / (f1 - f0))


@dataclass
class StageReport:
    recall_at_fpr: np.ndarray  # of the cumulative product score over stages 1..j
    accuracy: np.ndarray  # cumulative product score > decision
    recall: np.ndarray  # positives passing stages 1..j under the thresholds
    survivors: np.ndarray  # all patches passing stages 1..j under the thresholds
    negative_survivors: np.ndarray

    COLUMNS = ("stage", "recall_at_fpr", "accuracy", "recall", "survivors", "negative_survivors")

    def rows(self):
        return [
            (j + 1, float(self.recall_at_fpr[j]), float(self.accuracy[j]), float(self.recall[j]),
             float(self.survivors[j]), float(self.negative_survivors[j]))
            for j in range(len(self.accuracy))
        ]


def stage_report(probs, labels, thresholds, fpr_target=0.1, decision=0.5):
    """Cumulative per-stage statistics from all-stage probabilities ``(N, K)``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    cum = np.cumprod(probs, axis=1)
    passed = np.cumprod(probs > np.asarray(thresholds)[None, :], axis=1).astype(bool)
    k = probs.shape[1]
    roc_recall = np.array([recall_at_fpr(roc_points(cum[:, j], labels), fpr_target) for j in range(k)])
    acc = np.array([np.mean((cum[:, j] > decision) == (labels == 1)) for j in range(k)])
    pos, neg = labels == 1, labels == 0
    return StageReport(roc_recall, acc, passed[pos].mean(axis=0), passed.mean(axis=0), passed[neg].mean(axis=0))
