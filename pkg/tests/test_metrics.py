import json
import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from primseg.embedder import ClassifierParams, EmbedderParams, Model
from primseg.metrics import (EvalReport, evaluate_clustering, evaluate_segmentation,
                             iou_per_class, kmeans_points_baseline, mean_iou, nmi,
                             pair_precision_recall)
from primseg.shapes import PointCloud


def brute_pairs(pred, gt):
    both = same_pred = same_gt = 0
    for i, j in combinations(range(len(pred)), 2):
        p, g = pred[i] == pred[j], gt[i] == gt[j]
        both += p and g
        same_pred += p
        same_gt += g
    return (both / same_pred if same_pred else 1.0), (both / same_gt if same_gt else 1.0)


def brute_nmi(a, b):
    n = len(a)
    ua, ub = sorted(set(a)), sorted(set(b))
    pa = [sum(x == u for x in a) / n for u in ua]
    pb = [sum(x == u for x in b) / n for u in ub]
    mi = 0.0
    for i, u in enumerate(ua):
        for j, v in enumerate(ub):
            pij = sum(1 for x, y in zip(a, b) if x == u and y == v) / n
            if pij > 0:
                mi += pij * math.log(pij / (pa[i] * pb[j]))
    ha = -sum(p * math.log(p) for p in pa)
    hb = -sum(p * math.log(p) for p in pb)
    if ha == 0 and hb == 0:
        return 1.0
    return mi / (0.5 * (ha + hb))


# -- IoU ----------------------------------------------------------------------

def test_perfect_prediction():
    gt = np.array([0, 1, 2, 2, 1])
    assert mean_iou(gt, gt) == 1.0


def test_constant_prediction_on_two_classes():
    gt = np.array([0, 0, 1, 1])
    assert mean_iou(np.zeros(4, int), gt) == 0.25


def test_random_prediction_matches_analytic_expectation():
    r = np.random.default_rng(0)
    gt = np.repeat(np.arange(4), 25_000)
    pred = r.integers(0, 4, gt.size)
    p = 0.25
    assert mean_iou(pred, gt) == pytest.approx(p / (2 - p), abs=0.03)


def test_iou_only_counts_present_classes():
    per = iou_per_class(np.array([0, 5, 5]), np.array([0, 0, 1]))
    assert per == {0: 0.5, 1: 0.0}


def test_iou_input_validation():
    with pytest.raises(ValueError):
        iou_per_class([0, 1], [0])
    with pytest.raises(ValueError):
        iou_per_class([], [])


# -- clustering ---------------------------------------------------------------

def test_identical_partitions():
    a = np.array([0, 0, 1, 1, 2])
    assert evaluate_clustering(a, a) == (1.0, 1.0, 1.0)


def test_single_cluster_has_zero_nmi():
    n, _, r = evaluate_clustering(np.zeros(6, int), np.array([0, 0, 0, 1, 1, 1]))
    assert n == 0.0 and r == 1.0


def test_refinement_example():
    gt = np.repeat([0, 1], 4)
    pred = np.repeat([0, 1, 2, 3], 2)
    n, p, r = evaluate_clustering(pred, gt)
    assert p == 1.0
    assert r == pytest.approx(1 / 3)
    assert n == pytest.approx(brute_nmi(list(pred), list(gt)), abs=1e-12)


def test_clustering_needs_two_points():
    with pytest.raises(ValueError):
        evaluate_clustering([0], [0])
    with pytest.raises(ValueError):
        evaluate_clustering([0, 1], [0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 200), st.integers(1, 6), st.integers(1, 6))
def test_agrees_with_brute_force(seed, n, ka, kb):
    r = np.random.default_rng(seed)
    a, b = r.integers(0, ka, n), r.integers(0, kb, n)
    p, rec = pair_precision_recall(a, b)
    bp, br = brute_pairs(a, b)
    assert p == bp and rec == br
    value = nmi(a, b)
    assert value == pytest.approx(brute_nmi(list(a), list(b)), abs=1e-12)
    assert value == pytest.approx(nmi(b, a), abs=1e-15)
    assert 0.0 <= value <= 1.0 and 0.0 <= p <= 1.0 and 0.0 <= rec <= 1.0


def test_nmi_is_label_permutation_invariant():
    a = np.array([0, 0, 1, 1, 2, 2, 2])
    b = np.array([1, 1, 0, 2, 2, 0, 0])
    assert nmi(a, b) == pytest.approx(nmi(5 - a, b * 7), abs=1e-15)


# -- K-Means ----------------------------------------------------------------

def test_kmeans_single_cluster(rng):
    assert np.all(kmeans_points_baseline(rng.normal(size=(30, 3)), 1) == 0)


def test_kmeans_separated_blobs(rng):
    x = np.vstack([rng.normal(size=(50, 3)) * 0.1, rng.normal(size=(50, 3)) * 0.1 + 10])
    labels = kmeans_points_baseline(x, 2)
    truth = np.repeat([0, 1], 50)
    assert nmi(labels, truth) == 1.0


def test_kmeans_one_point_per_cluster(rng):
    labels = kmeans_points_baseline(rng.normal(size=(12, 3)), 12)
    assert len(set(labels)) == 12


def test_kmeans_arguments(rng):
    x = rng.normal(size=(5, 3))
    with pytest.raises(ValueError):
        kmeans_points_baseline(x, 0)
    with pytest.raises(ValueError):
        kmeans_points_baseline(x, 6)
    assert np.array_equal(kmeans_points_baseline(x, 2, seed=3), kmeans_points_baseline(x, 2, seed=3))


# -- segmentation evaluation ------------------------------------------------

class ConstantModel:
    embedder = EmbedderParams.init(hidden=8, dim=4, dtype=np.float64)

    def __init__(self, value):
        self.value = value

    def predict_labels(self, points):
        return np.full(len(points), self.value)


def test_evaluate_segmentation_report(rng):
    pts = rng.normal(size=(200, 3))
    test = [PointCloud(pts, np.repeat([3, 4], 100), "a")]
    report = evaluate_segmentation(ConstantModel(3), test)
    assert isinstance(report, EvalReport)
    assert report.miou == 0.25
    assert report.per_class_iou == {3: 0.5, 4: 0.0}
    assert 0.0 <= report.nmi <= 1.0
    assert report.shapes == 1
    assert {"nmi", "miou", "per_class_iou"} <= set(json.loads(report.to_json()))


def test_evaluate_segmentation_preconditions(rng):
    model = Model(EmbedderParams.init(hidden=8, dim=4), ClassifierParams.init(4, 2))
    with pytest.raises(ValueError, match="empty"):
        evaluate_segmentation(model, [])
    with pytest.raises(ValueError, match="labels"):
        evaluate_segmentation(model, [PointCloud(rng.normal(size=(10, 3)), None, "u")])
