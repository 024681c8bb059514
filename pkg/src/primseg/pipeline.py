"""Embed -> cluster -> fit -> sample -> losses for a single shape."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, no_grad
from .embedder import classify, embed
from .fitting import FitConfig, fit_all
from .losses import (LAMBDA_INTER, LAMBDA_SIM, coverage_loss, cross_entropy, fit_loss,
                     intersection_loss, similarity_loss, total_loss)
from .meanshift import BandwidthConfig, cluster
from .sdf import sample_inside, sample_surface


@dataclass(frozen=True)
class PipelineConfig:
    bandwidth: BandwidthConfig = field(default_factory=BandwidthConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    kind: str = "ellipsoid"
    surface_samples: int = 10_000
    interior_samples: int = 128
    lambda1: float = LAMBDA_INTER
    lambda2: float = LAMBDA_SIM
    use_intersection: bool = True

    def __post_init__(self):
        if self.kind not in ("ellipsoid", "cuboid"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")


@dataclass
class Frozen:
    """Discrete and stochastic choices of one forward pass.

    Re-using them makes the forward a smooth function of the parameters
    (bandwidth, NMS centers and sample layouts stay fixed)."""

    bandwidth: float
    centers: object
    surface_layout: object
    interior: list


@dataclass
class ShapeForward:
    total: Tensor
    breakdown: object
    fits: list
    assignment: object
    embeddings: Tensor
    meanshift: Tensor
    frozen: Frozen


def ssl_forward(points, emb, cfg: PipelineConfig = PipelineConfig(), seed=0, warmup=False,
                labels=None, classifier=None, frozen: Frozen | None = None):
    """Self-supervised loss of one shape (plus cross-entropy when labels given)."""
    z = embed(points, emb)
    x = Tensor(np.asarray(points, dtype=z.dtype))
    assign, g, b = cluster(z, cfg.bandwidth,
                           bandwidth=None if frozen is None else frozen.bandwidth,
                           centers=None if frozen is None else frozen.centers)
    fits = fit_all(x, assign.membership, cfg.fit, kind=cfg.kind)
    prims = [f.primitive for f in fits]
    if frozen is None:
        layout = sample_surface(prims, cfg.surface_samples, seed=seed)
        interior = ([sample_inside(p, cfg.interior_samples, seed=seed + 7 * m)
                     for m, p in enumerate(prims)] if cfg.use_intersection and len(prims) > 1
                    else [])
    else:
        layout = sample_surface(prims, layout=frozen.surface_layout)
        interior = frozen.interior
    l1 = coverage_loss(x, prims)
    l2 = fit_loss(x, layout)
    inter = intersection_loss(prims, interior) if interior else None
    sym = similarity_loss(g) if warmup else None
    ce = None
    if labels is not None and classifier is not None:
        ce = cross_entropy(classify(z, classifier), labels)
    total, bd = total_loss(l1, l2, inter, sym, ce, labeled=ce is not None, warmup=warmup,
                           lambda1=cfg.lambda1, lambda2=cfg.lambda2)
    fz = Frozen(b, assign, layout, interior)
    return ShapeForward(total, bd, fits, assign, z, g, fz)


def decompose(points, emb, cfg: PipelineConfig = PipelineConfig(), seed=0):
    """Forward-only decomposition: fitted primitives plus the loss breakdown."""
    with no_grad():
        return ssl_forward(points, emb, cfg, seed=seed)
