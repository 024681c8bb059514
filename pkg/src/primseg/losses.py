"""Reconstruction, intersection, similarity and cross-entropy objectives.

All losses are sums over points/samples (cross-entropy is a mean over points).
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .autograd import Tensor, constant, stack
from .primitives import as_primitive
from .sdf import SurfaceSampleBatch, signed_distance

LAMBDA_INTER = 1e-3
LAMBDA_SIM = 2.0
PROB_FLOOR = 1e-12


def sdf_matrix(x, prims):
    """(N, M) signed distances of world points to each primitive."""
    return stack([signed_distance(x, p) for p in prims], axis=1)


def coverage_loss(x, prims):
    """Sum over input points of the squared distance to the nearest primitive."""
    if not prims:
        raise ValueError("coverage loss needs at least one primitive")
    prims = [as_primitive(p) for p in prims]
    sd = sdf_matrix(x, prims)
    d2 = sd * sd
    return d2.min(axis=1).sum()


def fit_loss(x, samples):
    """Sum over primitive surface samples of the squared distance to the
    nearest input point.  Input points are constants."""
    pts = samples.points if isinstance(samples, SurfaceSampleBatch) else constant(samples)
    if pts.shape[0] == 0:
        raise ValueError("fit loss needs at least one surface sample")
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    idx, _ = _kernels.nearest(pts.data, x)
    diff = pts - Tensor(x[idx].astype(pts.dtype))
    return (diff * diff).sum()


def intersection_loss(prims, interior):
    """Squared negative part of every other primitive's SDF at each primitive's
    interior samples.  ``interior[m]`` is an (S, 3) array for primitive m."""
    prims = [as_primitive(p) for p in prims]
    if len(interior) != len(prims):
        raise ValueError("need one interior sample set per primitive")
    terms = []
    for m, pts in enumerate(interior):
        for j, prim in enumerate(prims):
            if j == m or len(pts) == 0:
                continue
            neg = signed_distance(pts, prim).clamp(hi=0.0)
            terms.append((neg * neg).sum())
    if not terms:
        dtype = prims[0].center.dtype if prims else np.float64
        return Tensor(np.zeros((), dtype=dtype))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def similarity_loss(g):
    """``sum_{i != j} (1 + g_i . g_j)^2`` over ordered pairs."""
    g = constant(g)
    gram = g @ g.T
    full = ((gram + 1.0) * (gram + 1.0)).sum()
    sq = (g * g).sum(axis=1) + 1.0
    return full - (sq * sq).sum()


def cross_entropy(probs, labels):
    """Mean over points of ``-log p[label]`` with probabilities floored at 1e-12."""
    probs = constant(probs)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = probs.shape
    if labels.shape != (n,):
        raise ValueError("one label per point required")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    picked = probs[np.arange(n), labels]
    return -(picked.clamp(lo=PROB_FLOOR).log().sum()) * (1.0 / n)


@dataclass
class LossBreakdown:
    l1: float
    l2: float
    inter: float
    sym: float
    ce: float
    total: float
    lambda1: float = LAMBDA_INTER
    lambda2: float = LAMBDA_SIM

    @property
    def recon(self):
        return self.l1 + self.l2

    def log_record(self, step, shape):
        return {"step": int(step), "shape": shape, "l1": self.l1, "l2": self.l2,
                "inter": self.inter, "sym": self.sym, "ce": self.ce, "total": self.total}

    def to_json(self, step, shape):
        return json.dumps(self.log_record(step, shape), sort_keys=True)


def _zero_like(ref):
    return Tensor(np.zeros((), dtype=ref.dtype))


def total_loss(l1=None, l2=None, inter=None, sym=None, ce=None, labeled=False, warmup=False,
               lambda1=LAMBDA_INTER, lambda2=LAMBDA_SIM):
    """Combine component losses; returns ``(total_tensor, LossBreakdown)``.

    ``sym`` counts only while ``warmup`` is set and ``ce`` only when
    ``labeled`` is set.  Missing components are zero.
    """
    parts = [t for t in (l1, l2, inter, sym, ce) if t is not None]
    if not parts:
        raise ValueError("no loss components given")
    ref = parts[0]

    def val(t):
        return t if t is not None else _zero_like(ref)

    l1, l2, inter, sym, ce = (val(t) for t in (l1, l2, inter, sym, ce))
    total = l1 + l2 + inter * lambda1
    if warmup:
        total = total + sym * lambda2
    if labeled:
        total = total + ce
    bd = LossBreakdown(float(l1.data), float(l2.data), float(inter.data),
                       float(sym.data) if warmup else 0.0,
                       float(ce.data) if labeled else 0.0,
                       float(total.data), lambda1, lambda2)
    return total, bd
