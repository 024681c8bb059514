"""Closed-form weighted ellipsoid fitting and a minimum-volume-ellipsoid baseline."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import constant, svd3
from .primitives import Primitive, PrimitiveParams

SIGMA_FLOOR = 1e-8


class UnfittableShapeError(RuntimeError):
    """Every cluster fell below the effective-weight threshold."""


@dataclass(frozen=True)
class FitConfig:
    kappa: float = math.sqrt(3.0) / 2.0
    min_effective_weight: float = 1e-3
    condition_cutoff: float = 1e5

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not self.condition_cutoff > 1:
            raise ValueError("condition_cutoff must exceed 1")


@dataclass
class FitResult:
    primitive: Primitive
    backward_enabled: bool
    effective_weight: float
    condition_number: float
    covariance: np.ndarray
    cluster: int = 0

    @property
    def params(self) -> PrimitiveParams:
        return self.primitive.values()


def _detach_primitive(p: Primitive):
    return Primitive(p.kind, p.center.detach(), p.rotation.detach(), p.semi_axes.detach())


def fit_ellipsoid(x, w, cfg: FitConfig = FitConfig(), n_total=None, cluster=0):
    """Weighted mean/covariance fit.

    ``mu = sum(w x) / sum(w)``, ``C = Xc^T diag(w) Xc / sum(w)`` and the
    semi-axes are ``kappa * sqrt(svd(C).s)``.  Clusters whose condition number
    exceeds the cutoff (or whose weight is too small) are returned detached.
    """
    x = constant(x)
    w = constant(w, x)
    if w.ndim != 1 or w.shape[0] != x.shape[0]:
        raise ValueError("weights must be a vector with one entry per point")
    if not (np.all(np.isfinite(x.data)) and np.all(np.isfinite(w.data))):
        raise ValueError("fit inputs must be finite")
    total = w.sum()
    if not total.data > 0:
        raise ValueError("sum of weights is zero")
    wc = w.reshape(-1, 1)
    mu = (wc * x).sum(axis=0) / total
    xc = x - mu
    cov = (xc * wc).T @ xc / total
    _, s, v = svd3(cov)
    s_data = s.data
    cond = float(s_data[0] / s_data[2]) if s_data[2] > 0 else math.inf
    axes = s.clamp(lo=SIGMA_FLOOR).sqrt() * cfg.kappa
    eff = float(total.data)
    n = x.shape[0] if n_total is None else n_total
    enabled = cond <= cfg.condition_cutoff and eff >= cfg.min_effective_weight * n
    prim = Primitive("ellipsoid", mu, v, axes)
    if not enabled:
        prim = _detach_primitive(prim)
    return FitResult(prim, enabled, eff, cond, cov.data.copy(), cluster)


def ellipsoid_to_cuboid(p):
    """Bounding box of an ellipsoid in its principal frame."""
    if isinstance(p, FitResult):
        r = p
        return FitResult(ellipsoid_to_cuboid(r.primitive), r.backward_enabled,
                         r.effective_weight, r.condition_number, r.covariance, r.cluster)
    if p.kind != "ellipsoid":
        raise ValueError(f"expected an ellipsoid, got {p.kind}")
    if isinstance(p, Primitive):
        return Primitive("cuboid", p.center, p.rotation, p.semi_axes)
    return PrimitiveParams("cuboid", p.center, p.rotation, p.semi_axes)


def fit_all(x, w, cfg: FitConfig = FitConfig(), kind="ellipsoid"):
    """One fit per membership column; near-empty clusters are dropped."""
    x = constant(x)
    w = constant(w, x)
    n, m = w.shape
    threshold = cfg.min_effective_weight * n
    col_weight = w.data.sum(axis=0)
    results = []
    for j in range(m):
        if col_weight[j] < threshold:
            continue
        r = fit_ellipsoid(x, w[:, j], cfg, n_total=n, cluster=j)
        results.append(ellipsoid_to_cuboid(r) if kind == "cuboid" else r)
    if not results:
        raise UnfittableShapeError("all clusters fall below the effective-weight threshold")
    return results


def inverse_distance_weights(x, power=0.25, center=None):
    """Membership ``1 / r**power`` about ``center`` (default: centroid)."""
    x = np.asarray(x, dtype=np.float64)
    c = x.mean(axis=0) if center is None else np.asarray(center, dtype=np.float64)
    r = np.linalg.norm(x - c, axis=1)
    return 1.0 / np.maximum(r, 1e-12) ** power


def mve_fit(x, tolerance=1e-3, max_iter=10_000):
    """Khachiyan minimum-volume enclosing ellipsoid (non-differentiable baseline).

    After the iteration the shape matrix is inflated, if needed, so that every
    input point is enclosed.
    """
    p = np.asarray(x, dtype=np.float64)
    n, d = p.shape
    if n < d + 1:
        raise ValueError("MVE needs at least 4 points")
    q = np.vstack([p.T, np.ones(n)])
    if np.linalg.matrix_rank(q) < d + 1:
        raise ValueError("points do not affinely span 3-D")
    u = np.full(n, 1.0 / n)
    for _ in range(int(max_iter)):
        xmat = (q * u) @ q.T
        mdist = np.einsum("ij,ji->i", q.T, np.linalg.solve(xmat, q))
        j = int(np.argmax(mdist))
        step = (mdist[j] - d - 1.0) / ((d + 1.0) * (mdist[j] - 1.0))
        new_u = (1.0 - step) * u
        new_u[j] += step
        err = np.linalg.norm(new_u - u)
        u = new_u
        if err < tolerance:
            break
    c = u @ p
    cov = (p * u[:, None]).T @ p - np.outer(c, c)
    shape = np.linalg.inv(cov) / d
    diff = p - c
    worst = float(np.max(np.einsum("ij,jk,ik->i", diff, shape, diff)))
    if worst > 1.0:
        shape = shape / worst
    evals, evecs = np.linalg.eigh(shape)
    axes = 1.0 / np.sqrt(evals)
    params = PrimitiveParams("ellipsoid", c, evecs, axes)
    return params.canonical()
