"""Detection and angular-error metrics."""
from __future__ import annotations

import math

import numpy as np

from .. import geom


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: mean precision at the rank of every positive.

    Items are ranked by descending score; equal scores keep input order.
    The sum is correctly rounded, so it does not depend on summation order.
    """
    scores = np.asarray(scores, float).reshape(-1)
    labels = np.asarray(labels, bool).reshape(-1)
    if len(scores) != len(labels):
        raise ValueError("scores and labels differ in length")
    if len(scores) == 0:
        raise ValueError("average precision of an empty set")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    hits = labels[np.argsort(-scores, kind="stable")]
    tp = np.cumsum(hits)
    prec = tp / np.arange(1, len(hits) + 1)
    return math.fsum(prec[hits]) / n_pos


def bidirectional_mae(gt_dirs, pred_dirs):
    """(g→p, p→g): mean angle from each ground truth to its nearest prediction and back."""
    g = np.asarray(gt_dirs, float).reshape(-1, 3)
    p = np.asarray(pred_dirs, float).reshape(-1, 3)
    if len(g) == 0 or len(p) == 0:
        raise ValueError("angular error needs ground truths and predictions")
    ang = geom.great_circle_angle(g[:, None, :], p[None, :, :])
    return math.fsum(ang.min(axis=1)) / len(g), math.fsum(ang.min(axis=0)) / len(p)


def spherical_ap(peaks, gts, threshold_deg: float) -> float:
    """AP over per-window peaks with angular matching.

    ``peaks`` is a list over windows of (directions K×3, scores K); ``gts``
    the matching list of ground-truth directions. Peaks are visited in
    descending score order over all windows (ties by window then peak
    order); each is a true positive iff an unmatched ground truth of its
    window lies within the threshold, and claims the nearest such one.
    """
    if threshold_deg <= 0:
        raise ValueError("threshold must be positive")
    recs = []
    for w, (d, s) in enumerate(peaks):
        for i, sc in enumerate(np.asarray(s, float).reshape(-1)):
            recs.append((sc, w, i))
    n_gt = sum(len(np.asarray(g).reshape(-1, 3)) for g in gts)
    if n_gt == 0:
        raise ValueError("spherical AP needs ground truths")
    if not recs:
        return 0.0
    order = np.argsort(-np.array([r[0] for r in recs]), kind="stable")
    used = [np.zeros(len(np.asarray(g).reshape(-1, 3)), bool) for g in gts]
    hits = np.zeros(len(recs), bool)
    for rank, j in enumerate(order):
        _, w, i = recs[j]
        g = np.asarray(gts[w], float).reshape(-1, 3)
        if len(g) == 0:
            continue
        ang = geom.great_circle_angle(g, np.asarray(peaks[w][0], float).reshape(-1, 3)[i])
        ang = np.where(used[w] | (ang > threshold_deg), np.inf, ang)
        k = int(np.argmin(ang))
        if np.isfinite(ang[k]):
            used[w][k] = True
            hits[rank] = True
    prec = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return math.fsum(prec[hits]) / n_gt


def argmax_direction(scores, directions):
    """Direction of the highest score; ties go to the lowest flat index."""
    s = np.asarray(scores, float).reshape(-1)
    d = np.asarray(directions, float).reshape(-1, 3)
    if len(s) != len(d):
        raise ValueError("scores and directions differ in length")
    return d[int(np.argmax(s))]


def box_scores(fov_map, boxes):
    """Max logit inside each (u0, v0, u1, v1) box, end-exclusive."""
    out = np.empty(len(boxes))
    for k, (u0, v0, u1, v1) in enumerate(np.asarray(boxes, int).reshape(-1, 4)):
        out[k] = fov_map[v0:v1, u0:u1].max()
    return out
