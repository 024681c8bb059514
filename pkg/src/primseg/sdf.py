"""Signed distances to ellipsoids/cuboids and differentiable surface sampling.

Surface samples are drawn outside the graph as parametric coordinates and
then pushed through the (differentiable) parameterisation, so gradients reach
the primitive's center, rotation and semi-axes while the sample layout stays
fixed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, concat, constant, where
from .primitives import Primitive, PrimitiveParams, as_primitive, surface_area

K1_FLOOR = 1e-6
K2_FLOOR = 1e-12


def to_local(x, prim):
    """World points (P, 3) to the primitive frame: ``V^T (x - mu)`` per row."""
    prim = as_primitive(prim)
    x = constant(x, prim.center)
    return (x - prim.center) @ prim.rotation


def to_world(p, prim):
    prim = as_primitive(prim)
    p = constant(p, prim.center)
    return p @ prim.rotation.T + prim.center


def ellipsoid_sdf(p, semi_axes):
    """Approximate signed distance ``k1 (k1 - 1) / k2`` for local points (P, 3).

    Exact for spheres.  Points with ``k1 < 1e-6`` (the 0/0 center) get
    ``-min(semi_axes)`` with zero gradient.
    """
    p = constant(p)
    s = constant(semi_axes, p)
    q1 = p / s
    q2 = p / (s * s)
    ss1 = (q1 * q1).sum(axis=1)
    ss2 = (q2 * q2).sum(axis=1)
    k1 = ss1.clamp(lo=K1_FLOOR ** 2).sqrt()
    k2 = ss2.clamp(lo=K2_FLOOR ** 2).sqrt()
    sd = k1 * (k1 - 1.0) / k2
    center = ss1.data < K1_FLOOR ** 2
    if np.any(center):
        inner = np.full(sd.shape, -np.min(s.data), dtype=sd.dtype)
        sd = where(center, Tensor(inner), sd)
    return sd


def cuboid_sdf(p, half_extents):
    """Exact box SDF ``|q+| + min(max(q), 0)`` with ``q = |p| - s``."""
    p = constant(p)
    s = constant(half_extents, p)
    q = p.abs() - s
    qp = q.clamp(lo=0.0)
    outside = (qp * qp).sum(axis=1).sqrt()
    inside = q.max(axis=1).clamp(hi=0.0)
    return outside + inside


def signed_distance(x, prim):
    """SDF of world points (P, 3) to ``prim`` (graph primitive or params)."""
    prim = as_primitive(prim)
    p = to_local(x, prim)
    if prim.kind == "ellipsoid":
        return ellipsoid_sdf(p, prim.semi_axes)
    return cuboid_sdf(p, prim.semi_axes)


def signed_distance_np(x, params: PrimitiveParams):
    """Plain-array SDF, for oracles and sampling."""
    return signed_distance(np.asarray(x, dtype=np.float64), params).data


# ---------------------------------------------------------------------------
# parameterisation
# ---------------------------------------------------------------------------

def ellipsoid_direction(u, v):
    """Unit-shape point ``(cos u sin v, sin u sin v, cos v)``; scale by the semi-axes."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    sv = np.sin(v)
    return np.stack([np.cos(u) * sv, np.sin(u) * sv, np.cos(v)], axis=-1)


def inverse_parameterization(p_local, semi_axes):
    """Recover ``(u, v)`` from local ellipsoid-surface points.

    ``u`` lies in (-pi, pi], ``v`` in [0, pi].
    """
    p = np.asarray(p_local, dtype=np.float64) / np.asarray(semi_axes, dtype=np.float64)
    v = np.arccos(np.clip(p[..., 2], -1.0, 1.0))
    u = np.arctan2(p[..., 1], p[..., 0])
    u = np.where(u <= -np.pi, np.pi, u)
    return u, v


def _area_jacobian(u, v, a, b, c):
    sv, cv = np.sin(v), np.cos(v)
    cu, su = np.cos(u), np.sin(u)
    return sv * np.sqrt((b * c * cu * sv) ** 2 + (a * c * su * sv) ** 2 + (a * b * cv) ** 2)


def sample_ellipsoid_uv(semi_axes, count, rng):
    """Area-uniform ``(u, v)`` samples by rejection on the parametric rectangle."""
    a, b, c = (float(x) for x in semi_axes)
    bound = max(a * b, a * c, b * c)
    us, vs = [], []
    got = 0
    while got < count:
        n = max(64, int(1.7 * (count - got)) + 16)
        u = np.pi - rng.uniform(0.0, 2.0 * np.pi, n)
        v = rng.uniform(0.0, np.pi, n)
        keep = rng.uniform(0.0, bound, n) < _area_jacobian(u, v, a, b, c)
        us.append(u[keep])
        vs.append(v[keep])
        got += int(keep.sum())
    return np.concatenate(us)[:count], np.concatenate(vs)[:count]


def sample_cuboid_faces(half_extents, count, rng):
    """Area-uniform points on the unit-box surface.

    Returns ``(unit, uv, face)``: ``unit`` in [-1, 1]^3 with one coordinate at
    +-1, ``uv`` the two in-face coordinates, ``face`` in 0..5 (axis*2 + side).
    """
    s = np.asarray(half_extents, dtype=np.float64)
    areas = np.array([s[1] * s[2], s[0] * s[2], s[0] * s[1]])
    probs = np.repeat(areas, 2) / (2.0 * areas.sum())
    face = rng.choice(6, size=count, p=probs)
    uv = rng.uniform(-1.0, 1.0, size=(count, 2))
    unit = np.empty((count, 3))
    axis = face // 2
    side = np.where(face % 2 == 0, 1.0, -1.0)
    for k in range(3):
        others = [i for i in range(3) if i != k]
        rows = axis == k
        unit[rows, k] = side[rows]
        unit[rows, others[0]] = uv[rows, 0]
        unit[rows, others[1]] = uv[rows, 1]
    return unit, uv, face


def allocate_counts(weights, total):
    """Largest-remainder apportionment of ``total`` proportional to ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    if not np.isfinite(w).all() or w.sum() <= 0:
        raise ValueError("allocation weights must be finite with positive sum")
    exact = w / w.sum() * total
    counts = np.floor(exact).astype(np.int64)
    rem = total - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts


@dataclass
class SurfaceSampleBatch:
    """Surface samples over several primitives.

    ``points`` is graph-attached; everything else is a frozen layout that
    :func:`surface_points` can re-evaluate against new primitive parameters.
    """

    points: Tensor
    source_primitive: np.ndarray
    params_uv: np.ndarray
    unit: np.ndarray
    face: np.ndarray

    def __len__(self):
        return len(self.source_primitive)


def surface_points(prims, layout: SurfaceSampleBatch):
    """Rebuild sample coordinates from a frozen layout and (new) primitives."""
    prims = [as_primitive(p) for p in prims]
    parts = []
    for m, prim in enumerate(prims):
        rows = np.flatnonzero(layout.source_primitive == m)
        if rows.size == 0:
            continue
        unit = Tensor(layout.unit[rows], dtype=prim.semi_axes.dtype)
        local = unit * prim.semi_axes
        parts.append(local @ prim.rotation.T + prim.center)
    return concat(parts, axis=0)


def sample_surface(prims, total=10000, seed=0, layout=None):
    """Area-weighted near-uniform samples over all primitive surfaces.

    Pass a previous batch as ``layout`` to keep the parametric coordinates
    and only re-evaluate the coordinates (finite-difference checks).
    """
    prims = [as_primitive(p) for p in prims]
    if not prims:
        raise ValueError("need at least one primitive to sample")
    if layout is not None:
        pts = surface_points(prims, layout)
        return SurfaceSampleBatch(pts, layout.source_primitive, layout.params_uv,
                                  layout.unit, layout.face)
    areas = np.array([surface_area(p.kind, p.semi_axes.data) for p in prims])
    if not np.isfinite(areas).all() or areas.sum() <= 0:
        raise ValueError("total primitive surface area is zero")
    counts = allocate_counts(areas, total)
    src, uvs, units, faces = [], [], [], []
    for m, (prim, n) in enumerate(zip(prims, counts)):
        rng = np.random.default_rng(int(seed) ^ m)
        if n == 0:
            continue
        if prim.kind == "ellipsoid":
            u, v = sample_ellipsoid_uv(prim.semi_axes.data, n, rng)
            uvs.append(np.stack([u, v], axis=1))
            units.append(ellipsoid_direction(u, v))
            faces.append(np.full(n, -1, dtype=np.int64))
        else:
            unit, uv, face = sample_cuboid_faces(prim.semi_axes.data, n, rng)
            uvs.append(uv)
            units.append(unit)
            faces.append(face)
        src.append(np.full(n, m, dtype=np.int64))
    layout = SurfaceSampleBatch(None, np.concatenate(src), np.concatenate(uvs),
                                np.concatenate(units), np.concatenate(faces))
    layout.points = surface_points(prims, layout)
    return layout


def _sample_inside(params: PrimitiveParams, count, rng, max_factor=100):
    s = params.semi_axes
    accepted = []
    got = 0
    drawn = 0
    limit = max_factor * count
    while got < count:
        if drawn >= limit:
            raise RuntimeError(
                f"interior sampling accepted {got}/{count} after {drawn} draws; "
                "primitive is degenerate")
        n = min(limit - drawn, max(64, 2 * (count - got)))
        local = rng.uniform(-1.0, 1.0, size=(n, 3)) * s
        drawn += n
        if params.kind == "ellipsoid":
            inside = np.sum((local / s) ** 2, axis=1) < 1.0
        else:
            inside = cuboid_sdf(local, s).data < 0.0
        accepted.append(local[inside])
        got += int(inside.sum())
    local = np.concatenate(accepted)[:count]
    return local @ params.rotation.T + params.center, got / drawn


def sample_inside(prim, count=128, seed=0):
    """Uniform interior points (world frame, plain array) by box rejection."""
    params = prim.values() if isinstance(prim, Primitive) else prim
    pts, _ = _sample_inside(params, count, np.random.default_rng(seed))
    return pts


def interior_acceptance_rate(prim, count, seed=0):
    params = prim.values() if isinstance(prim, Primitive) else prim
    _, rate = _sample_inside(params, count, np.random.default_rng(seed))
    return rate
