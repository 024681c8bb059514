"""Segmentation IoU, clustering NMI / pair-counting precision-recall, K-Means baseline."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .embedder import substream


@dataclass
class EvalReport:
    nmi: float
    miou: float
    per_class_iou: dict
    precision_recall: list = field(default_factory=list)
    shapes: int = 0

    def to_json(self):
        d = asdict(self)
        d["per_class_iou"] = {str(k): v for k, v in self.per_class_iou.items()}
        return json.dumps(d, sort_keys=True, indent=2)


def iou_per_class(pred, gt):
    """Pooled IoU for every class present in ``gt``."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth differ in length")
    if gt.size == 0:
        raise ValueError("empty test set")
    out = {}
    for c in np.unique(gt):
        p, g = pred == c, gt == c
        out[int(c)] = float(np.sum(p & g) / np.sum(p | g))
    return out


def mean_iou(pred, gt):
    return float(np.mean(list(iou_per_class(pred, gt).values())))


def _contingency(a, b):
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(a, b):
    """Mutual information normalised by the arithmetic mean of the entropies.

    Two single-cluster partitions are identical and score 1; if only one side
    is a single cluster the score is 0.
    """
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("partitions differ in length")
    table = _contingency(a, b)
    n = table.sum()
    ha, hb = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    if ha == 0.0 and hb == 0.0:
        return 1.0
    nz = table > 0
    pij = table[nz] / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))[nz] / (n * n)
    mi = float(np.sum(pij * np.log(pij / outer)))
    return float(np.clip(mi / (0.5 * (ha + hb)), 0.0, 1.0))


def _pairs(counts):
    counts = np.asarray(counts, dtype=np.int64)
    return int(np.sum(counts * (counts - 1) // 2))


def pair_precision_recall(pred, gt):
    """Pair counting: precision = co-clustered pairs sharing a gt class over all
    co-clustered pairs; recall = same over all gt-sharing pairs.  An empty
    denominator scores 1."""
    table = _contingency(pred, gt)
    both = _pairs(table.ravel())
    pred_pairs = _pairs(table.sum(axis=1))
    gt_pairs = _pairs(table.sum(axis=0))
    precision = both / pred_pairs if pred_pairs else 1.0
    recall = both / gt_pairs if gt_pairs else 1.0
    return float(precision), float(recall)


def evaluate_clustering(assignment, gt):
    """Returns ``(nmi, precision, recall)`` of a hard clustering vs part labels."""
    assignment, gt = np.asarray(assignment), np.asarray(gt)
    if assignment.shape != gt.shape:
        raise ValueError("assignment and labels differ in length")
    if assignment.size < 2:
        raise ValueError("clustering metrics need at least two points")
    p, r = pair_precision_recall(assignment, gt)
    return nmi(assignment, gt), p, r


def kmeans_points_baseline(points, k, seed=0):
    """Lloyd K-Means on raw coordinates (k-means++ init, 100 iterations)."""
    from sklearn.cluster import KMeans

    pts = np.asarray(getattr(points, "points", points), dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(pts):
        raise ValueError("k exceeds the number of points")
    rs = int(substream(seed, "kmeans").integers(2**31))
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=100, algorithm="lloyd",
                random_state=rs)
    return km.fit_predict(pts).astype(np.int64)


def evaluate_segmentation(model, test):
    """Pooled per-class IoU of ``model.predict_labels`` over a labeled test set,
    plus clustering quality of the mean-shift decomposition of each shape."""
    from .pipeline import decompose
    from .train import pipeline_for

    test = list(test)
    if not test:
        raise ValueError("empty test set")
    if any(not pc.has_labels for pc in test):
        raise ValueError("evaluation requires labels on every test shape")
    preds, gts, nmis, prs = [], [], [], []
    cfg = pipeline_for(model)
    for pc in test:
        preds.append(model.predict_labels(pc.points))
        gts.append(pc.labels)
        try:
            hard = decompose(pc.points, model.embedder, cfg).assignment.hard_labels()
        except (ValueError, RuntimeError):
            continue
        n, p, r = evaluate_clustering(hard, pc.labels)
        nmis.append(n)
        prs.append({"shape": pc.name, "precision": p, "recall": r})
    per_class = iou_per_class(np.concatenate(preds), np.concatenate(gts))
    return EvalReport(float(np.mean(nmis)) if nmis else 0.0,
                      float(np.mean(list(per_class.values()))), per_class, prs, len(test))
