"""Differentiable mean-shift clustering of unit-norm point embeddings."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .autograd import Tensor, constant

EXP_CLAMP = 50.0
MAX_CENTERS = 32


class DegenerateEmbeddingError(ValueError):
    """All embeddings coincide, so no bandwidth can be estimated."""


@dataclass(frozen=True)
class BandwidthConfig:
    neighbor_rank: int = 100
    iterations: int = 10
    # scale membership logits by 1/b^2 (the mean-shift kernel) instead of 1
    sharp_membership: bool = False

    def __post_init__(self):
        if self.neighbor_rank < 1 or self.iterations < 1:
            raise ValueError("neighbor_rank and iterations must be >= 1")


@dataclass
class ClusterAssignment:
    centers: np.ndarray          # (M, D)
    membership: Tensor           # (N, M), rows sum to one
    center_indices: np.ndarray   # (M,) source point of each center

    @property
    def count(self):
        return len(self.center_indices)

    def hard_labels(self):
        return np.argmax(self.membership.data, axis=1)


def estimate_bandwidth(z, neighbor_rank=100):
    """Mean distance from each row to its ``min(rank, N-1)``-th nearest other row."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    n = len(z)
    if n < 2:
        raise ValueError("bandwidth needs at least two embeddings")
    k = min(int(neighbor_rank), n - 1)
    b = float(np.mean(_kernels.kth_neighbor_distance(z, k)))
    if not b > 0.0:
        raise DegenerateEmbeddingError(
            "all embeddings coincide (bandwidth 0); enable the similarity-loss warmup "
            "to spread embeddings before clustering")
    return b


def normalize_rows(g):
    return g / (g * g).sum(axis=1, keepdims=True).sqrt()


def meanshift_iterate(z, bandwidth, iterations=10):
    """Recurrent von Mises-Fisher mean-shift starting from ``G = Z``.

    Each step forms ``K = exp(G Z^T / b^2)``, replaces every seed by the
    K-weighted mean of the (fixed) embeddings and renormalises rows.  The
    per-row maximum is subtracted before ``exp`` (the row normalisation makes
    the result invariant to it) and the remaining exponent is clamped to
    [-50, 50].
    """
    z = constant(z)
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    inv_b2 = 1.0 / (bandwidth * bandwidth)
    zt = z.T
    g = z
    for _ in range(iterations):
        logits = (g @ zt) * inv_b2
        shift = Tensor(np.max(logits.data, axis=1, keepdims=True))
        k = (logits - shift).clamp(-EXP_CLAMP, EXP_CLAMP).softmax(axis=1)
        g = normalize_rows(k @ z)
    return g


def nms_centers(g, bandwidth, max_centers=MAX_CENTERS):
    """Greedy density-peak extraction; returns indices of the center points.

    Density counts rows within ``bandwidth`` (self included).  Peaks are
    taken in order of decreasing density (ties to the lower index) as long as
    they have density >= 2, and each removes every row within ``bandwidth``.
    """
    g = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=np.float64)
    dens = _kernels.density(g, bandwidth)
    order = np.lexsort((np.arange(len(g)), -dens))
    alive = np.ones(len(g), dtype=bool)
    picked = []
    for i in order:
        if dens[i] < 2:
            break
        if not alive[i]:
            continue
        picked.append(int(i))
        d = np.sqrt(np.sum((g - g[i]) ** 2, axis=1))
        alive &= d > bandwidth
        if len(picked) == max_centers:
            break
    if not picked:
        picked = [int(order[0])]
    return np.asarray(picked, dtype=np.int64)


def soft_membership(g, centers, clamp=EXP_CLAMP, scale=1.0):
    """Row-stochastic ``softmax_m(scale * c_m . g_i)`` with constant centers.

    The global maximum logit is subtracted and the exponent clamped.  Scaled
    logits are shifted per row instead: with a large scale a global shift
    would push whole rows into the clamp and flatten them to uniform.
    """
    g = constant(g)
    c = Tensor(np.asarray(centers.data if isinstance(centers, Tensor) else centers, dtype=g.dtype))
    logits = g @ c.T
    if scale != 1.0:
        logits = logits * float(scale)
        shift = Tensor(np.max(logits.data, axis=1, keepdims=True))
    else:
        shift = float(np.max(logits.data))
    return (logits - shift).clamp(-clamp, clamp).softmax(axis=1)


def cluster(z, cfg: BandwidthConfig = BandwidthConfig(), bandwidth=None, centers=None):
    """Bandwidth, mean-shift, NMS and soft membership in one call.

    ``bandwidth`` and ``centers`` (an earlier :class:`ClusterAssignment`) can
    be frozen from a previous call; frozen centers keep their vectors, which
    is exactly what the backward pass assumes.
    Returns ``(assignment, g, bandwidth)``.
    """
    z = constant(z)
    b = estimate_bandwidth(z, cfg.neighbor_rank) if bandwidth is None else bandwidth
    g = meanshift_iterate(z, b, cfg.iterations)
    if centers is None:
        idx = nms_centers(g, b)
        vecs = g.data[idx].copy()
    else:
        idx, vecs = centers.center_indices, centers.centers
    w = soft_membership(g, vecs, scale=1.0 / (b * b) if cfg.sharp_membership else 1.0)
    return ClusterAssignment(vecs, w, idx), g, b
