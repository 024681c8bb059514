import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from primseg.autograd import Tensor, backward
from primseg.losses import (LossBreakdown, coverage_loss, cross_entropy, fit_loss,
                            intersection_loss, similarity_loss, total_loss)
from primseg.primitives import Primitive, PrimitiveParams, random_rotation
from primseg.sdf import sample_inside, sample_surface

from conftest import central_diff, unit_sphere_samples

SPHERE = PrimitiveParams.sphere()


def scalar(x):
    return Tensor(np.float64(x))


# -- coverage ---------------------------------------------------------------

def test_coverage_zero_on_surface():
    x = unit_sphere_samples(500)
    assert coverage_loss(x, [SPHERE]).item() < 1e-10


def test_coverage_single_point():
    far = PrimitiveParams.sphere(center=(3, 0, 0))
    assert coverage_loss(np.zeros((1, 3)), [far]).item() == pytest.approx(4.0, abs=1e-12)


def test_coverage_is_monotone_in_primitives(rng):
    x = rng.normal(size=(100, 3))
    one = coverage_loss(x, [SPHERE]).item()
    two = coverage_loss(x, [SPHERE, PrimitiveParams.sphere(center=(10, 0, 0))]).item()
    assert two <= one


def test_coverage_zero_iff_on_some_surface(rng):
    prims = [SPHERE, PrimitiveParams.sphere(center=(4, 0, 0), radius=0.5)]
    x = np.vstack([unit_sphere_samples(50, 1), 0.5 * unit_sphere_samples(50, 2) + [4, 0, 0]])
    assert coverage_loss(x, prims).item() < 1e-10
    x[0] *= 1.01
    assert coverage_loss(x, prims).item() > 0


def test_coverage_needs_a_primitive():
    with pytest.raises(ValueError):
        coverage_loss(np.zeros((1, 3)), [])


# -- fit ----------------------------------------------------------------------

def test_fit_zero_when_samples_are_inputs(rng):
    x = rng.normal(size=(50, 3))
    assert fit_loss(x, x.copy()).item() == 0.0


def test_fit_one_sample_unit_away():
    x = np.array([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
    assert fit_loss(x, np.array([[0.0, 1.0, 0.0]])).item() == 1.0


def test_shrinking_spurious_primitive_lowers_fit():
    x = unit_sphere_samples(300)
    spurious = PrimitiveParams("ellipsoid", [4.0, 0.0, 0.0], np.eye(3), [0.5, 0.5, 0.5])
    layout = sample_surface([SPHERE, spurious], 1000, seed=0)

    def loss(axes):
        prims = [Primitive.constant(SPHERE),
                 Primitive("ellipsoid", Tensor(spurious.center), Tensor(np.eye(3)), axes)]
        return fit_loss(x, sample_surface(prims, layout=layout))

    s = Tensor(spurious.semi_axes, requires_grad=True)
    g = backward(loss(s), [s])[0]
    numeric = central_diff(lambda a: loss(Tensor(a)).item(), spurious.semi_axes)
    np.testing.assert_allclose(g, numeric, rtol=1e-6)
    assert np.all(g[1:] > 0)          # growing the transverse axes moves samples away
    assert loss(Tensor(spurious.semi_axes * 0.9)).item() < loss(Tensor(spurious.semi_axes)).item()


# -- intersection -------------------------------------------------------------

def test_disjoint_spheres_do_not_intersect():
    a = PrimitiveParams.sphere(center=(3, 0, 0))
    b = PrimitiveParams.sphere(center=(-3, 0, 0))
    interior = [sample_inside(a, 128, 0), sample_inside(b, 128, 1)]
    assert intersection_loss([a, b], interior).item() == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_disjoint_bounding_spheres_give_zero(seed):
    r = np.random.default_rng(seed)
    prims = []
    for m in range(3):
        axes = r.uniform(0.2, 1.0, 3)
        kind = r.choice(["ellipsoid", "cuboid"])
        reach = np.linalg.norm(axes) if kind == "cuboid" else axes.max()
        prims.append(PrimitiveParams(kind, [6.0 * m, 0, 0], random_rotation(r), axes * min(1, 2.5 / reach)))
    interior = [sample_inside(p, 64, m) for m, p in enumerate(prims)]
    assert intersection_loss(prims, interior).item() == 0.0


def test_identical_spheres_overlap():
    interior = [sample_inside(SPHERE, 200, 0), sample_inside(SPHERE, 200, 1)]
    loss = intersection_loss([SPHERE, SPHERE], interior).item()
    expected = sum(np.sum((np.linalg.norm(p, axis=1) - 1.0) ** 2) for p in interior)
    assert loss > 0
    assert loss == pytest.approx(expected, rel=1e-12)


def test_concentric_spheres_against_monte_carlo():
    small, big = SPHERE, PrimitiveParams.sphere(radius=2.0)
    n = 4000
    pts = sample_inside(small, n, seed=5)
    loss = intersection_loss([small, big], [pts, np.zeros((0, 3))]).item()
    per = (np.linalg.norm(pts, axis=1) - 2.0) ** 2
    assert np.all((per >= 1.0) & (per <= 4.0))
    # independent estimate: only the radius matters, and r = U^(1/3) is uniform in the ball
    r = np.random.default_rng(99)
    radii = r.uniform(size=200_000) ** (1.0 / 3.0)
    oracle = n * np.mean((radii - 2.0) ** 2)
    assert loss == pytest.approx(oracle, rel=0.05)
    assert oracle / n == pytest.approx(1.6, rel=0.01)   # 3 * int_0^1 (r - 2)^2 r^2 dr


def test_intersection_needs_matching_sample_sets():
    with pytest.raises(ValueError):
        intersection_loss([SPHERE, SPHERE], [np.zeros((1, 3))])


# -- similarity -------------------------------------------------------------

@pytest.mark.parametrize("g, expected", [
    (np.array([[1.0, 0.0], [-1.0, 0.0]]), 0.0),
    (np.array([[0.6, 0.8], [0.6, 0.8]]), 8.0),
    (np.eye(3), 6.0),
])
def test_similarity_closed_forms(g, expected):
    assert similarity_loss(g).item() == pytest.approx(expected, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 20))
def test_similarity_matches_pairwise_sum(seed, n):
    g = np.random.default_rng(seed).normal(size=(n, 4))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    brute = sum((1 + g[i] @ g[j]) ** 2 for i in range(n) for j in range(n) if i != j)
    value = similarity_loss(g).item()
    assert value == pytest.approx(brute, abs=1e-9)
    assert value >= -1e-9
    assert similarity_loss(g[::-1]).item() == pytest.approx(value, abs=1e-9)


# -- cross-entropy ----------------------------------------------------------

def test_cross_entropy_examples():
    assert cross_entropy(np.eye(4), np.arange(4)).item() < 1e-11
    assert cross_entropy(np.full((6, 4), 0.25), [0, 1, 2, 3, 0, 1]).item() == pytest.approx(math.log(4))


def test_cross_entropy_floor():
    assert cross_entropy(np.array([[1.0, 0.0]]), [1]).item() == pytest.approx(-math.log(1e-12))


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        cross_entropy(np.full((2, 3), 1 / 3), [0, 3])
    with pytest.raises(ValueError):
        cross_entropy(np.full((2, 3), 1 / 3), [0, -1])


def test_cross_entropy_gradient(rng):
    p0 = rng.dirichlet(np.ones(5), size=7)
    labels = rng.integers(0, 5, 7)
    t = Tensor(p0, requires_grad=True)
    g = backward(cross_entropy(t, labels), [t])[0]
    numeric = central_diff(lambda p: cross_entropy(p, labels).item(), p0)
    np.testing.assert_allclose(g, numeric, atol=1e-5)


# -- combination ------------------------------------------------------------

def test_total_unlabeled_without_warmup():
    total, bd = total_loss(scalar(1.0), scalar(2.0), scalar(10.0), scalar(5.0), scalar(7.0))
    assert total.item() == pytest.approx(3.0 + 0.001 * 10.0)
    assert bd.sym == 0.0 and bd.ce == 0.0
    assert bd.recon == 3.0


def test_total_labeled_with_warmup():
    total, bd = total_loss(scalar(1.0), scalar(2.0), scalar(10.0), scalar(5.0), scalar(7.0),
                           labeled=True, warmup=True)
    assert total.item() == pytest.approx(3.0 + 0.01 + 10.0 + 7.0)
    assert bd.total == pytest.approx(bd.recon + bd.lambda1 * bd.inter + bd.lambda2 * bd.sym + bd.ce)


def test_total_with_zero_weights():
    total, _ = total_loss(scalar(1.0), scalar(2.0), scalar(10.0), scalar(5.0), scalar(7.0),
                          labeled=True, warmup=True, lambda1=0.0, lambda2=0.0)
    assert total.item() == pytest.approx(10.0)


def test_total_requires_a_component():
    with pytest.raises(ValueError):
        total_loss()


def test_breakdown_log_record():
    bd = LossBreakdown(1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    rec = bd.log_record(3, "s")
    assert set(rec) == {"step", "shape", "l1", "l2", "inter", "sym", "ce", "total"}
    assert bd.to_json(3, "s") == bd.to_json(3, "s")
