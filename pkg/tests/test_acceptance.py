"""Acceptance criteria, one test each, at the stated tolerances.

Every test prints a single ``criterion N: PASS|FAIL ...`` line (visible with
``pytest -s`` or in ``-v`` runs) before asserting.
"""
import json
import math
import time

import numpy as np
import pytest

from primseg.autograd import Tensor, backward, svd3
from primseg.cli import main
from primseg.embedder import embed
from primseg.fewshot import few_shot_benchmark
from primseg.fitting import FitConfig, fit_ellipsoid, inverse_distance_weights, mve_fit
from primseg.losses import coverage_loss, cross_entropy, intersection_loss, similarity_loss
from primseg.meanshift import cluster
from primseg.metrics import evaluate_segmentation, nmi
from primseg.primitives import PrimitiveParams, random_rotation
from primseg.sdf import cuboid_sdf, ellipsoid_sdf, sample_inside, sample_surface
from primseg.shapes import PointCloud, generate_synthetic, normalize, random_separated_spec
from primseg.train import TrainConfig, pipeline_for, train

from conftest import central_diff, unit_sphere_samples

SQRT3 = math.sqrt(3.0)

# Self-supervised preset for part discovery on separated shapes (512-point
# training shapes; neighbor rank 25 keeps the bandwidth at the same fraction of
# the shape as rank 100 does at 2048 points).
CLUSTER_PRESET = dict(steps=600, supervised=False, sharp_membership=True, kappa=SQRT3,
                      neighbor_rank=25, learning_rate=0.003, seed=0)

# Few-shot benchmark training, shared by the joint and supervised-only runs.
FEWSHOT_PRESET = dict(steps=1000, learning_rate=0.05, sharp_membership=True, kappa=SQRT3,
                      neighbor_rank=25, ssl_weight=0.2)


def report(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print("\n" + line)
    return ok


# 1 -----------------------------------------------------------------------------

def test_criterion_1_gradient_integrity(tmp_path, capsys):
    t0 = time.perf_counter()
    code = main(["gradcheck", "--report", str(tmp_path / "g.json")])
    elapsed = time.perf_counter() - t0
    doc = json.loads((tmp_path / "g.json").read_text())
    worst = max(c["max_rel_error"] for c in doc["cases"] if c["max_rel_error"] is not None)
    names = {c["name"] for c in doc["cases"]}
    ok = code == 0 and worst < 1e-4 and elapsed < 60 and {"objective", "objective_after_warmup"} <= names
    with capsys.disabled():
        report(1, ok, f"max rel err {worst:.2e}, {len(names)} cases, {elapsed:.1f}s")
    assert ok


# 2 -----------------------------------------------------------------------------

def _svd_scalar(ws, wv):
    def fn(t):
        _, s, v = svd3(t)
        return (s * Tensor(ws)).sum() + (v * Tensor(wv)).sum()
    return fn


def test_criterion_2_svd_backward(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        q = np.linalg.qr(rng.normal(size=(3, 3)))[0]
        s = np.sort(rng.uniform(0.5, 3.0, 3))[::-1]
        s[1] = min(s[1], s[0] - 0.2)
        s[2] = min(s[2], s[1] - 0.2)
        m = q @ np.diag(s) @ q.T
        fn = _svd_scalar(rng.normal(size=3), rng.normal(size=(3, 3)))
        t = Tensor(m, requires_grad=True)
        g = backward(fn(t), [t])[0]
        fd = central_diff(lambda a: fn(Tensor(a)).item(), m)
        worst = max(worst, np.max(np.abs(g - fd)) / np.max(np.abs(fd)))
    near = np.diag([1.0, 1.0 + 1e-9, 0.5])
    t = Tensor(near, requires_grad=True)
    g_near = backward(_svd_scalar(np.ones(3), np.arange(9.0).reshape(3, 3))(t), [t])[0]
    finite = bool(np.all(np.isfinite(g_near)))
    ill = np.array([[1.0, 0, 0], [0, 1e-3, 0], [0, 0, 1e-7]])
    x = rng.normal(size=(200, 3)) @ np.sqrt(ill)
    w = Tensor(np.ones(200), requires_grad=True)
    r = fit_ellipsoid(x, w)
    gw = backward(r.primitive.semi_axes.sum(), [w])[0]
    flagged = (not r.backward_enabled) and r.condition_number > 1e5 and np.all(gw == 0)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and finite and flagged and elapsed < 10
    with capsys.disabled():
        report(2, ok, f"FD rel err {worst:.2e} over 100 inputs, degenerate finite={finite}, "
                      f"cutoff flagged={flagged}, {elapsed:.1f}s")
    assert ok


# 3 -----------------------------------------------------------------------------

def test_criterion_3_fitting_oracle(capsys):
    t0 = time.perf_counter()
    x = unit_sphere_samples(2000, seed=3)
    r = fit_ellipsoid(x, np.ones(2000))
    cov_ok = np.max(np.abs(r.covariance - np.eye(3) / 3.0)) <= 0.05 / 3.0
    rng = np.random.default_rng(3)
    equi = 0.0
    for _ in range(20):
        pts = rng.normal(size=(60, 3)) * [2.0, 1.0, 0.5]
        w = rng.uniform(0.1, 1.0, 60)
        rot, shift = random_rotation(rng), rng.normal(size=3)
        a, b = fit_ellipsoid(pts, w), fit_ellipsoid(pts @ rot.T + shift, w)
        equi = max(equi, np.max(np.abs(b.params.center - (rot @ a.params.center + shift))),
                   np.max(np.abs(b.params.semi_axes - a.params.semi_axes)),
                   np.max(np.abs(b.covariance - rot @ a.covariance @ rot.T)))
    pts = rng.normal(size=(60, 3))
    w = rng.uniform(0.1, 1.0, 60)
    base = fit_ellipsoid(pts, w)
    scale_exact = all(np.array_equal(base.covariance, fit_ellipsoid(pts, w * c).covariance)
                      and np.array_equal(base.params.semi_axes, fit_ellipsoid(pts, w * c).params.semi_axes)
                      for c in (0.5, 2.0, 8.0, 1024.0))
    elapsed = time.perf_counter() - t0
    ok = cov_ok and equi < 1e-9 and scale_exact and elapsed < 5
    with capsys.disabled():
        report(3, ok, f"cov err {np.max(np.abs(r.covariance - np.eye(3) / 3)):.4f}, "
                      f"equivariance {equi:.1e}, weight-scale exact={scale_exact}, {elapsed:.1f}s")
    assert ok


# 4 -----------------------------------------------------------------------------

def test_criterion_4_clustering_oracle(capsys):
    t0 = time.perf_counter()
    shapes = [normalize(generate_synthetic(random_separated_spec(2 + s % 3, 1000 + s, 512)))
              for s in range(60)]
    unlabeled = [PointCloud(pc.points, None, f"train{i}") for i, pc in enumerate(shapes)]
    model = train(unlabeled, [], TrainConfig(**CLUSTER_PRESET)).model
    # same bandwidth fraction on the 2048-point evaluation shapes
    bw = pipeline_for(model).bandwidth
    bw = type(bw)(neighbor_rank=100, iterations=bw.iterations, sharp_membership=bw.sharp_membership)
    exact, scores = 0, []
    for s in range(50):
        k = 2 + s % 3
        pc = normalize(generate_synthetic(random_separated_spec(k, s, 2048)))
        assignment, _, _ = cluster(embed(pc.points, model.embedder), bw)
        exact += assignment.count == k
        scores.append(nmi(assignment.hard_labels(), pc.labels))
    elapsed = time.perf_counter() - t0
    rate, mean_nmi = exact / 50, float(np.mean(scores))
    ok = rate >= 0.9 and mean_nmi >= 0.9 and elapsed < 300
    with capsys.disabled():
        report(4, ok, f"exact K in {rate:.0%} of 50 shapes, NMI {mean_nmi:.3f}, {elapsed:.0f}s")
    assert ok


# 5 -----------------------------------------------------------------------------

def test_criterion_5_robustness(capsys):
    t0 = time.perf_counter()
    x = np.vstack([unit_sphere_samples(2000, seed=0), [[5.0, 0.0, 0.0]]])
    robust = fit_ellipsoid(x, inverse_distance_weights(x, 0.25), FitConfig(kappa=SQRT3))
    weighted, mve = robust.params.semi_axes.max(), mve_fit(x).semi_axes.max()
    elapsed = time.perf_counter() - t0
    ok = weighted < 1.5 and mve >= 2.5 and elapsed < 5
    with capsys.disabled():
        report(5, ok, f"weighted max axis {weighted:.3f}, MVE max axis {mve:.3f}, {elapsed:.1f}s")
    assert ok


# 6 -----------------------------------------------------------------------------

def _class_avg_iou(model, test):
    return evaluate_segmentation(model, test).miou


@pytest.mark.slow
def test_criterion_6_semi_supervised_benefit(capsys):
    t0 = time.perf_counter()
    gains = []
    for seed in range(5):
        bench = few_shot_benchmark(seed)
        joint = train(bench.unlabeled, bench.labeled, TrainConfig(seed=seed, **FEWSHOT_PRESET)).model
        sup = train([], bench.labeled, TrainConfig(seed=seed, ssl=False, **FEWSHOT_PRESET)).model
        gains.append(100.0 * (_class_avg_iou(joint, bench.test) - _class_avg_iou(sup, bench.test)))
    elapsed = time.perf_counter() - t0
    wins = sum(g > 0 for g in gains)
    ok = wins >= 4 and np.mean(gains) >= 3.0 and elapsed < 1800
    with capsys.disabled():
        report(6, ok, f"IoU gains {[round(g, 2) for g in gains]} (wins {wins}/5, "
                      f"mean {np.mean(gains):.2f}), {elapsed:.0f}s")
    assert ok


# 7 -----------------------------------------------------------------------------

def test_criterion_7_loss_identities(capsys):
    t0 = time.perf_counter()
    sims = [similarity_loss(np.array([[1.0, 0.0], [-1.0, 0.0]])).item(),
            similarity_loss(np.array([[0.6, 0.8], [0.6, 0.8]])).item(),
            similarity_loss(np.eye(3)).item()]
    sim_ok = np.allclose(sims, [0.0, 8.0, 6.0], atol=1e-12)
    a = PrimitiveParams.sphere()
    b = PrimitiveParams.sphere(center=(5.0, 0.0, 0.0))
    disjoint = intersection_loss([a, b], [sample_inside(a, 256, 0), sample_inside(b, 256, 1)]).item()
    big = PrimitiveParams.sphere(radius=2.0)
    n = 4000
    pts = sample_inside(a, n, seed=5)
    conc = intersection_loss([a, big], [pts, np.zeros((0, 3))]).item()
    radii = np.random.default_rng(99).uniform(size=200_000) ** (1.0 / 3.0)
    oracle = n * np.mean((radii - 2.0) ** 2)
    conc_ok = conc > 0 and abs(conc - oracle) <= 0.05 * oracle
    ce = cross_entropy(np.full((8, 5), 0.2), [0, 1, 2, 3, 4, 0, 1, 2]).item()
    ce_ok = abs(ce - math.log(5)) < 1e-12
    elapsed = time.perf_counter() - t0
    ok = sim_ok and disjoint == 0.0 and conc_ok and ce_ok and elapsed < 5
    with capsys.disabled():
        report(7, ok, f"sym {sims}, disjoint inter {disjoint}, concentric {conc:.1f} vs MC "
                      f"{oracle:.1f}, ce-ln5 {ce - math.log(5):.1e}, {elapsed:.2f}s")
    assert ok


# 8 -----------------------------------------------------------------------------

def _run_twice(tmp_path, make_args, outputs):
    blobs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir(parents=True)
        assert main(make_args(d)) == 0
        blobs.append({name: (d / name).read_bytes() for name in outputs(d)})
    return blobs[0] == blobs[1] and all(blobs[0].values())


def test_criterion_8_determinism(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--out-dir", str(data), "--benchmark", "--unlabeled", "3", "--k", "1",
                 "--seed", "4", "--points", "256"]) == 0
    shape = sorted((data / "test").iterdir())[0]
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"hidden": 8, "dim": 4, "surface_samples": 200,
                                         "neighbor_rank": 10}}))
    ckpt = tmp_path / "model.json"
    assert main(["train", "--unlabeled", str(data / "unlabeled"), "--labeled", str(data / "labeled"),
                 "--steps", "2", "--seed", "1", "--config", str(cfg), "--out", str(ckpt)]) == 0

    def listing(d):
        return sorted(p.name for p in d.iterdir())

    results = {
        "synth": _run_twice(tmp_path / "synth", lambda d: ["synth", "--out-dir", str(d / "o"),
                            "--count", "2", "--seed", "9"], lambda d: [f"o/{n}" for n in listing(d / "o")]),
        "decompose": _run_twice(tmp_path / "dec", lambda d: [
            "decompose", str(shape), "--checkpoint", str(ckpt), "--seed", "3", "--out-json",
            str(d / "p.json"), "--out-obj", str(d / "p.obj")], lambda d: ["p.json", "p.obj"]),
        "train": _run_twice(tmp_path / "train", lambda d: [
            "train", "--unlabeled", str(data / "unlabeled"), "--labeled", str(data / "labeled"),
            "--steps", "2", "--seed", "1", "--config", str(cfg), "--out", str(d / "m.json")],
            lambda d: ["m.json", "m.json.log.jsonl"]),
        "eval": _run_twice(tmp_path / "eval", lambda d: [
            "eval", "--checkpoint", str(ckpt), "--test", str(data / "test"), "--report",
            str(d / "r.json")], lambda d: ["r.json"]),
        "gradcheck": _run_twice(tmp_path / "gc", lambda d: [
            "gradcheck", "--seed", "2", "--report", str(d / "g.json")], lambda d: ["g.json"]),
    }
    ok = all(results.values())
    with capsys.disabled():
        report(8, ok, ", ".join(f"{k}={'identical' if v else 'DIFFERENT'}" for k, v in results.items()))
    assert ok


# 9 -----------------------------------------------------------------------------

def test_criterion_9_coverage_losses(capsys):
    t0 = time.perf_counter()
    sphere = PrimitiveParams.sphere()
    l1_surface = coverage_loss(unit_sphere_samples(1000, 1), [sphere]).item()
    box = PrimitiveParams("cuboid", [0, 0, 0], np.eye(3), [0.5, 1.0, 1.5])
    batch = sample_surface([sphere, box], 2000, seed=3)
    l1_mixed = coverage_loss(batch.points.data, [sphere, box]).item()
    rng = np.random.default_rng(9)
    worst = 0.0
    for r in (0.3, 1.0, 2.5):
        p = rng.normal(size=(2000, 3)) * rng.uniform(0.01, 3.0, (2000, 1))
        p = p[np.linalg.norm(p, axis=1) > 1e-3]
        worst = max(worst, np.max(np.abs(ellipsoid_sdf(p, np.full(3, r)).data
                                         - (np.linalg.norm(p, axis=1) - r))))
    cases = [((2, 0, 0), 1.0), ((0, 0, 0), -1.0), ((1, 1, 1), 0.0), ((2, 2, 1), math.sqrt(2.0)),
             ((0.5, 0, 0), -0.5), ((0, 3, 0), 2.0), ((0.2, -0.9, 0.1), -0.1)]
    got = cuboid_sdf(np.array([c for c, _ in cases], float), np.ones(3)).data
    cube_ok = all(g == e for g, (_, e) in zip(got, cases[:6])) and abs(got[6] + 0.1) < 1e-15
    elapsed = time.perf_counter() - t0
    ok = l1_surface < 1e-12 and l1_mixed < 1e-12 and worst <= 1e-12 and cube_ok and elapsed < 5
    with capsys.disabled():
        report(9, ok, f"L1 on surface {max(l1_surface, l1_mixed):.1e}, sphere SDF err {worst:.1e}, "
                      f"cuboid cases exact={cube_ok}, {elapsed:.2f}s")
    assert ok
