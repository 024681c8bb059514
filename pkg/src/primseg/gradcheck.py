"""Central finite-difference verification of every differentiable op.

Each registered case builds a scalar from float64 inputs.  The analytic
gradient is compared against central differences either per coordinate
(small inputs) or along random directions plus a few random coordinates
(large inputs).  The error of a case is ``max|analytic - fd| / max|fd|``.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor, backward, concat, stack, svd3, where
from .embedder import ClassifierParams, EmbedderParams, classify, embed, substream
from .fitting import FitConfig, fit_ellipsoid
from .losses import (coverage_loss, cross_entropy, fit_loss, intersection_loss,
                     similarity_loss)
from .meanshift import BandwidthConfig, meanshift_iterate, normalize_rows, soft_membership
from .pipeline import PipelineConfig, ssl_forward
from .primitives import Primitive, PrimitiveParams, random_rotation
from .sdf import cuboid_sdf, ellipsoid_sdf, sample_inside, sample_surface, surface_points
from .shapes import generate_synthetic, normalize, random_separated_spec

TOLERANCE = 1e-4
STEP = 1e-6
SKIPPED = "skipped (condition cutoff)"


class SkipCase(Exception):
    pass


@dataclass
class CaseResult:
    name: str
    status: str
    max_rel_error: float
    checks: int
    seconds: float
    note: str = ""

    def to_dict(self):
        # wall time stays out of the report so seeded runs are byte-identical
        err = self.max_rel_error
        return {"name": self.name, "status": self.status, "checks": self.checks,
                "max_rel_error": None if not math.isfinite(err) else err, "note": self.note}


@dataclass
class GradcheckReport:
    seed: int
    tolerance: float
    cases: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.status != "fail" for c in self.cases)

    @property
    def failures(self):
        return [c.name for c in self.cases if c.status == "fail"]

    def to_dict(self):
        return {"seed": self.seed, "tolerance": self.tolerance, "passed": self.passed,
                "cases": [c.to_dict() for c in self.cases]}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _perturbed(inputs, key, delta):
    out = dict(inputs)
    out[key] = inputs[key] + delta
    return out


def check_function(fn, inputs, rng, coords=None, directions=0, step=STEP):
    """Compare analytic and finite-difference gradients of ``fn(dict of Tensors)``.

    ``coords=None`` checks every coordinate; an integer samples that many.
    ``directions`` adds random directional-derivative checks.
    Returns ``(max_rel_error, number_of_checks)``.
    """
    leaves = {k: Tensor(v, requires_grad=True) for k, v in inputs.items()}
    grads = backward(fn(leaves), leaves)

    def value(arrs):
        with ag.no_grad():
            return float(fn({k: Tensor(v) for k, v in arrs.items()}).data)

    analytic, numeric = [], []
    flat = [(k, i) for k, v in inputs.items() for i in range(v.size)]
    if coords is not None and coords < len(flat):
        pick = rng.choice(len(flat), size=coords, replace=False)
        flat = [flat[i] for i in sorted(pick)]
    for k, i in flat:
        e = np.zeros_like(inputs[k])
        e.flat[i] = step
        fd = (value(_perturbed(inputs, k, e)) - value(_perturbed(inputs, k, -e))) / (2 * step)
        analytic.append(grads[k].flat[i])
        numeric.append(fd)
    for _ in range(directions):
        d = {k: rng.normal(size=v.shape) for k, v in inputs.items()}
        plus = {k: v + step * d[k] for k, v in inputs.items()}
        minus = {k: v - step * d[k] for k, v in inputs.items()}
        numeric.append((value(plus) - value(minus)) / (2 * step))
        analytic.append(sum(float(np.sum(grads[k] * d[k])) for k in inputs))
    a, n = np.asarray(analytic), np.asarray(numeric)
    scale = max(float(np.max(np.abs(n))), 1e-10)
    return float(np.max(np.abs(a - n)) / scale), len(a)


# ---------------------------------------------------------------------------
# registered cases: name -> builder(rng) returning (fn, inputs, options)
# ---------------------------------------------------------------------------

def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _elementwise(op, make_input=None):
    def build(rng):
        x = (make_input or (lambda r: r.normal(size=(3, 4))))(rng)
        w = rng.normal(size=x.shape)
        return (lambda t: (op(t["x"]) * Tensor(w)).sum()), {"x": x}, {}
    return build


def _binary(op, make_b=None):
    def build(rng):
        a = rng.normal(size=(3, 4))
        b = (make_b or (lambda r: r.normal(size=(1, 4))))(rng)
        w = rng.normal(size=(3, 4))
        return (lambda t: (op(t["a"], t["b"]) * Tensor(w)).sum()), {"a": a, "b": b}, {}
    return build


def _case_matmul(rng):
    a, b, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    return (lambda t: ((t["a"] @ t["b"]) * Tensor(w)).sum()), {"a": a, "b": b}, {}


def _case_getitem(rng):
    x = rng.normal(size=(5, 3))
    idx = np.array([0, 2, 2, 4])
    w1, w2 = rng.normal(size=(4, 3)), rng.normal(size=(2, 2))
    return (lambda t: (t["x"][idx] * Tensor(w1)).sum() + (t["x"][1:3, :2] * Tensor(w2)).sum(),
            {"x": x}, {})


def _case_reductions(rng):
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=5)
    return (lambda t: (t["x"].sum(axis=0) * Tensor(w)).sum() + t["x"].mean() * 3.0
            + (t["x"].transpose().reshape(20) * Tensor(np.arange(20.0))).sum()), {"x": x}, {}


def _case_extrema(rng):
    x = rng.permutation(20).reshape(4, 5) * 0.1 + rng.uniform(0, 0.01, size=(4, 5))
    w = rng.normal(size=4)
    return (lambda t: (t["x"].max(axis=1) * Tensor(w)).sum() + t["x"].min(axis=0).sum()
            + t["x"].max()), {"x": x}, {}


def _case_clamp(rng):
    x = rng.uniform(-2, 2, size=(4, 5))
    x = np.where(np.abs(np.abs(x) - 1.0) < 0.05, x * 1.2, x)   # keep clear of the bounds
    w = rng.normal(size=x.shape)
    return (lambda t: (t["x"].clamp(-1.0, 1.0) * Tensor(w)).sum()), {"x": x}, {}


def _case_softmax(rng):
    x, w = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    return (lambda t: (t["x"].softmax(axis=1) * Tensor(w)).sum()), {"x": x}, {}


def _case_concat_stack_where(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    mask = rng.uniform(size=(2, 3)) > 0.5
    w1, w2, w3 = rng.normal(size=(4, 3)), rng.normal(size=(2, 2, 3)), rng.normal(size=(2, 3))
    return (lambda t: (concat([t["a"], t["b"]], axis=0) * Tensor(w1)).sum()
            + (stack([t["a"], t["b"] * t["a"]], axis=1) * Tensor(w2)).sum()
            + (where(mask, t["a"], t["b"]) * Tensor(w3)).sum()), {"a": a, "b": b}, {}


def _well_conditioned_psd(rng, gap=0.2):
    s = np.sort(rng.uniform(0.5, 2.0, size=3))[::-1]
    s = s + np.array([2 * gap, gap, 0.0])
    q = random_rotation(rng)
    return q @ np.diag(s) @ q.T


def _case_svd3(rng, degenerate=False):
    m = _well_conditioned_psd(rng)
    if degenerate:
        m = np.diag([1.0, 0.5, 1e-9])
    s = np.linalg.svd(m, compute_uv=False)
    if s[0] / max(s[2], 1e-300) > FitConfig().condition_cutoff:
        raise SkipCase(f"condition number {s[0] / max(s[2], 1e-300):.3g}")
    ws, wv = rng.normal(size=3), rng.normal(size=(3, 3))

    def fn(t):
        mm = t["m"] + t["m"].T      # symmetric perturbations keep the input PSD-like
        _, sv, v = svd3(mm * 0.5)
        return (sv * Tensor(ws)).sum() + (v * Tensor(wv)).sum()
    return fn, {"m": m}, {}


def _case_normalize_rows(rng):
    x, w = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    return (lambda t: (normalize_rows(t["x"]) * Tensor(w)).sum()), {"x": x}, {}


def _unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _case_meanshift(rng):
    z = _unit_rows(rng, 12, 4)
    w = rng.normal(size=(12, 4))
    return (lambda t: (meanshift_iterate(normalize_rows(t["z"]), 0.8, 3) * Tensor(w)).sum(),
            {"z": z}, {})


def _case_soft_membership(rng, scale=1.0):
    g = _unit_rows(rng, 10, 4)
    c = _unit_rows(rng, 3, 4)
    w = rng.normal(size=(10, 3))
    return (lambda t: (soft_membership(t["g"], c, scale=scale) * Tensor(w)).sum()), {"g": g}, {}


def _case_fit_ellipsoid(rng, degenerate=False):
    n = 40
    x = rng.normal(size=(n, 3)) * np.array([1.0, 0.6, 0.3])
    if degenerate:
        x[:, 2] = 0.0
    w0 = rng.uniform(0.2, 1.0, size=n)
    probe = fit_ellipsoid(x, w0)
    if not probe.backward_enabled:
        raise SkipCase(f"condition number {probe.condition_number:.3g}")
    wc, wr, wa = rng.normal(size=3), rng.normal(size=(3, 3)), rng.normal(size=3)

    def fn(t):
        p = fit_ellipsoid(t["x"], t["w"]).primitive
        return ((p.center * Tensor(wc)).sum() + (p.rotation * Tensor(wr)).sum()
                + (p.semi_axes * Tensor(wa)).sum())
    return fn, {"x": x, "w": w0}, {}


def _prim_inputs(rng, scale=1.0):
    return {"center": rng.normal(size=3) * 0.1, "rot": random_rotation(rng),
            "axes": np.sort(rng.uniform(0.4, 1.2, size=3))[::-1] * scale}


def _prim(t, kind):
    return Primitive(kind, t["center"], t["rot"], t["axes"])


def _case_ellipsoid_sdf(rng):
    p = rng.normal(size=(15, 3))
    a = np.array([1.2, 0.8, 0.5])
    w = rng.normal(size=15)
    return (lambda t: (ellipsoid_sdf(t["p"], t["a"]) * Tensor(w)).sum()), {"p": p, "a": a}, {}


def _case_cuboid_sdf(rng):
    a = np.array([1.0, 0.7, 0.4])
    p = rng.uniform(-2.0, 2.0, size=(20, 3))
    # keep away from the medial surfaces / edges where the box SDF has kinks
    q = np.abs(p) - a
    bad = np.any(np.abs(q) < 0.05, axis=1)
    p = p[~bad]
    w = rng.normal(size=len(p))
    return (lambda t: (cuboid_sdf(t["p"], t["a"]) * Tensor(w)).sum()), {"p": p, "a": a}, {}


def _case_surface_points(rng, kind):
    inputs = _prim_inputs(rng)
    params = PrimitiveParams(kind, inputs["center"], inputs["rot"], inputs["axes"])
    layout = sample_surface([params], total=30, seed=int(rng.integers(1 << 30)))
    w = rng.normal(size=(len(layout), 3))
    return (lambda t: (surface_points([_prim(t, kind)], layout) * Tensor(w)).sum(), inputs, {})


def _two_prims(rng):
    a, b = _prim_inputs(rng), _prim_inputs(rng)
    b["center"] = b["center"] + np.array([0.6, 0.0, 0.0])
    return {f"a.{k}": v for k, v in a.items()} | {f"b.{k}": v for k, v in b.items()}


def _prims_from(t, kind="ellipsoid"):
    return [Primitive(kind, t[f"{p}.center"], t[f"{p}.rot"], t[f"{p}.axes"]) for p in "ab"]


def _case_coverage(rng):
    inputs = _two_prims(rng)
    x = rng.normal(size=(30, 3))
    return (lambda t: coverage_loss(x, _prims_from(t))), inputs, {"coords": 24, "directions": 3}


def _case_fit_loss(rng):
    inputs = _two_prims(rng)
    x = rng.normal(size=(40, 3))
    params = [PrimitiveParams("ellipsoid", inputs[f"{p}.center"], inputs[f"{p}.rot"],
                              inputs[f"{p}.axes"]) for p in "ab"]
    layout = sample_surface(params, total=60, seed=int(rng.integers(1 << 30)))
    return ((lambda t: fit_loss(x, surface_points(_prims_from(t), layout))), inputs,
            {"coords": 24, "directions": 3})


def _case_intersection(rng):
    inputs = _two_prims(rng)
    params = [PrimitiveParams("ellipsoid", inputs[f"{p}.center"], inputs[f"{p}.rot"],
                              inputs[f"{p}.axes"]) for p in "ab"]
    interior = [sample_inside(p, 64, seed=int(rng.integers(1 << 30))) for p in params]
    return ((lambda t: intersection_loss(_prims_from(t), interior)), inputs,
            {"coords": 24, "directions": 3})


def _case_similarity(rng):
    g = _unit_rows(rng, 8, 4)
    return (lambda t: similarity_loss(normalize_rows(t["g"]))), {"g": g}, {}


def _case_cross_entropy(rng):
    logits = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, size=6)
    return (lambda t: cross_entropy(t["l"].softmax(axis=1), labels)), {"l": logits}, {}


def _case_embed_classify(rng):
    emb = EmbedderParams.init(8, 4, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    clf = ClassifierParams.init(4, 3, seed=1, dtype=np.float64)
    x = rng.normal(size=(10, 3))
    w = rng.normal(size=(10, 3))
    inputs = dict(emb.arrays) | dict(clf.arrays)
    return ((lambda t: (classify(embed(x, {k: t[k] for k in emb.arrays}), t) * Tensor(w)).sum()),
            inputs, {"coords": 40, "directions": 4})


def _objective_case(rng, warmup=True, sharp=False):
    """Full per-shape objective at N=64, D=8 with labels (so every term is on)."""
    spec = random_separated_spec(3, seed=int(rng.integers(1 << 16)), points_per_shape=64)
    pc = normalize(generate_synthetic(spec))
    emb = EmbedderParams.init(16, 8, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    clf = ClassifierParams.init(8, 3, seed=2, dtype=np.float64)
    cfg = PipelineConfig(bandwidth=BandwidthConfig(neighbor_rank=10, sharp_membership=sharp),
                         surface_samples=200,
                         interior_samples=16)
    keys = list(emb.arrays)
    seed = int(rng.integers(1 << 30))
    first = ssl_forward(pc.points, emb.tensors(False), cfg, seed=seed, warmup=warmup,
                        labels=pc.labels, classifier=clf)
    frozen = first.frozen
    if not all(f.backward_enabled for f in first.fits):
        raise SkipCase("a fitted cluster exceeds the condition cutoff")

    def fn(t):
        return ssl_forward(pc.points, {k: t[k] for k in keys}, cfg, seed=seed, warmup=warmup,
                           labels=pc.labels, classifier=t, frozen=frozen).total
    note = f"M={len(first.fits)}"
    return fn, dict(emb.arrays) | dict(clf.arrays), {"coords": 30, "directions": 6, "note": note}


REGISTRY = {
    "add": _binary(lambda a, b: a + b),
    "sub": _binary(lambda a, b: a - b),
    "mul": _binary(lambda a, b: a * b),
    "div": _binary(lambda a, b: a / b, lambda r: r.uniform(0.5, 2.0, size=(1, 4))),
    "neg": _elementwise(lambda x: -x),
    "matmul": _case_matmul,
    "getitem": _case_getitem,
    "sum_mean_reshape_transpose": _case_reductions,
    "max_min": _case_extrema,
    "exp": _elementwise(lambda x: x.exp()),
    "log": _elementwise(lambda x: x.log(), lambda r: r.uniform(0.2, 3.0, size=(3, 4))),
    "sqrt": _elementwise(lambda x: x.sqrt(), lambda r: r.uniform(0.2, 3.0, size=(3, 4))),
    "abs": _elementwise(lambda x: x.abs(), lambda r: _away_from_zero(r, (3, 4))),
    "tanh": _elementwise(lambda x: x.tanh()),
    "clamp": _case_clamp,
    "softmax": _case_softmax,
    "concat_stack_where": _case_concat_stack_where,
    "svd3": _case_svd3,
    "normalize_rows": _case_normalize_rows,
    "meanshift": _case_meanshift,
    "soft_membership": _case_soft_membership,
    "soft_membership_scaled": lambda rng: _case_soft_membership(rng, scale=4.0),
    "fit_ellipsoid": _case_fit_ellipsoid,
    "ellipsoid_sdf": _case_ellipsoid_sdf,
    "cuboid_sdf": _case_cuboid_sdf,
    "surface_points_ellipsoid": lambda rng: _case_surface_points(rng, "ellipsoid"),
    "surface_points_cuboid": lambda rng: _case_surface_points(rng, "cuboid"),
    "coverage_loss": _case_coverage,
    "fit_loss": _case_fit_loss,
    "intersection_loss": _case_intersection,
    "similarity_loss": _case_similarity,
    "cross_entropy": _case_cross_entropy,
    "embed_classify": _case_embed_classify,
    "objective": _objective_case,
    "objective_after_warmup": lambda rng: _objective_case(rng, warmup=False),
    "objective_sharp_membership": lambda rng: _objective_case(rng, sharp=True),
}


def _broken(fn):
    """Wrap a case so its output passes through an identity with a wrong backward."""
    def wrapped(t):
        out = fn(t)
        return ag._make(out.data, (out,), lambda g: (1.5 * g,), "broken")
    return wrapped


def gradcheck_suite(seed=0, broken=(), degenerate=False, only=None, tolerance=TOLERANCE):
    """Run every registered case; returns a :class:`GradcheckReport`.

    ``broken`` names cases whose gradient is deliberately corrupted (a test
    hook); ``degenerate`` feeds rank-deficient data to the SVD and fitting
    cases, which are then reported as skipped.
    """
    broken = set(broken)
    unknown = broken - set(REGISTRY)
    if unknown:
        raise KeyError(f"unknown gradcheck case(s): {sorted(unknown)}")
    report = GradcheckReport(int(seed), tolerance)
    for name, build in REGISTRY.items():
        if only is not None and name not in only:
            continue
        rng = substream(seed, f"gradcheck/{name}")
        start = time.perf_counter()
        try:
            if degenerate and name in ("svd3", "fit_ellipsoid"):
                fn, inputs, opts = build(rng, degenerate=True)
            else:
                fn, inputs, opts = build(rng)
        except SkipCase as exc:
            report.cases.append(CaseResult(name, SKIPPED, math.nan, 0,
                                           time.perf_counter() - start, str(exc)))
            continue
        opts = dict(opts)
        note = opts.pop("note", "")
        if name in broken:
            fn = _broken(fn)
        inputs = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
        err, n = check_function(fn, inputs, rng, **opts)
        status = "pass" if err < tolerance else "fail"
        report.cases.append(CaseResult(name, status, err, n, time.perf_counter() - start, note))
    return report
