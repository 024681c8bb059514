import json

import numpy as np
import pytest

from primseg.primitives import PrimitiveParams
from primseg.sdf import signed_distance_np
from primseg.shapes import (PointCloud, PointCloudFormatError, SyntheticSpec, export_primitives,
                            generate_synthetic, load_directory, load_pointcloud,
                            load_primitives_json, normalize, random_separated_spec, read_obj,
                            save_pointcloud)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_xyz_without_labels(tmp_path):
    pc = load_pointcloud(write(tmp_path, "a.xyz", "0 0 0\n1 0 0\n"))
    assert len(pc) == 2 and pc.labels is None
    np.testing.assert_array_equal(pc.points[1], [1, 0, 0])


def test_xyz_with_labels(tmp_path):
    pc = load_pointcloud(write(tmp_path, "a.xyz", "0 0 0 1\n1 0 0 2\n"))
    assert tuple(pc.labels) == (1, 2)


def test_malformed_line_names_line_number(tmp_path):
    with pytest.raises(PointCloudFormatError, match="line 1"):
        load_pointcloud(write(tmp_path, "a.xyz", "0 0\n"))


def test_empty_cloud_is_an_error(tmp_path):
    with pytest.raises(PointCloudFormatError):
        load_pointcloud(write(tmp_path, "a.xyz", "\n"))


def test_ply_ascii_with_label(tmp_path):
    text = ("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
            "property float z\nproperty uint label\nend_header\n0 0 0 3\n1 2 3 4\n")
    pc = load_pointcloud(write(tmp_path, "a.ply", text))
    np.testing.assert_array_equal(pc.points[1], [1, 2, 3])
    assert tuple(pc.labels) == (3, 4)


def test_save_load_roundtrip_nine_digits(tmp_path, rng):
    pc = PointCloud(rng.normal(size=(20, 3)), rng.integers(0, 4, size=20), "x")
    for ext in ("xyz", "ply"):
        path = tmp_path / f"c.{ext}"
        save_pointcloud(pc, path)
        back = load_pointcloud(path)
        np.testing.assert_allclose(back.points, pc.points, rtol=1e-8, atol=1e-9)
        np.testing.assert_array_equal(back.labels, pc.labels)


def test_load_directory_sorted(tmp_path):
    write(tmp_path, "b.xyz", "0 0 0\n")
    write(tmp_path, "a.xyz", "1 1 1\n")
    write(tmp_path, "notes.txt", "ignored")
    assert [pc.name for pc in load_directory(tmp_path)] == ["a", "b"]


def test_normalize_examples():
    out = normalize(PointCloud([[1.0, 0, 0], [3.0, 0, 0]]))
    np.testing.assert_allclose(out.points, [[-1, 0, 0], [1, 0, 0]])
    again = normalize(out)
    np.testing.assert_allclose(again.points, out.points, atol=1e-6)
    with pytest.raises(ValueError):
        normalize(PointCloud(np.ones((5, 3))))


def test_normalize_invariants(rng):
    pc = normalize(PointCloud(rng.normal(size=(100, 3)) * 7 + 3, np.arange(100)))
    assert np.linalg.norm(pc.points.mean(axis=0)) < 1e-6
    norms = np.linalg.norm(pc.points, axis=1)
    assert 1 - 1e-6 < norms.max() <= 1.0
    np.testing.assert_array_equal(pc.labels, np.arange(100))


def test_synthetic_single_sphere_moments():
    pc = generate_synthetic(SyntheticSpec([PrimitiveParams.sphere()], 1000, seed=3))
    assert np.all(pc.labels == 0)
    cov = np.cov(pc.points.T, bias=True)
    np.testing.assert_allclose(cov, np.eye(3) / 3, atol=0.05 / 3)


def test_synthetic_two_spheres_balanced():
    parts = [PrimitiveParams.sphere((-3, 0, 0)), PrimitiveParams.sphere((3, 0, 0))]
    pc = generate_synthetic(SyntheticSpec(parts, 2000, seed=1, separated=True))
    frac = np.mean(pc.labels == 0)
    assert 0.45 <= frac <= 0.55


def test_synthetic_deterministic():
    spec = random_separated_spec(3, seed=5, points_per_shape=300)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.labels, b.labels)


def test_synthetic_rejects_zero_axis():
    with pytest.raises(ValueError):
        PrimitiveParams("ellipsoid", np.zeros(3), np.eye(3), [1.0, 0.0, 1.0])


def test_separated_labels_match_nearest_primitive():
    for seed in range(5):
        spec = random_separated_spec(4, seed=seed, points_per_shape=800)
        pc = generate_synthetic(spec)
        sd = np.stack([np.abs(signed_distance_np(pc.points, p)) for p in spec.part_params], axis=1)
        np.testing.assert_array_equal(np.argmin(sd, axis=1), pc.labels)


def test_export_obj_unit_sphere(tmp_path):
    path = tmp_path / "s.obj"
    export_primitives([PrimitiveParams.sphere()], path)
    verts, faces, groups = read_obj(path)
    assert len(faces) == 32 * 16 * 2          # 32x16 quads, two triangles each
    norms = np.linalg.norm(verts, axis=1)
    assert np.all((norms >= 0.99) & (norms <= 1.0 + 1e-9))
    assert faces.min() == 1 and faces.max() == len(verts)
    assert groups == ["primitive_0_ellipsoid"]


def test_export_empty(tmp_path):
    export_primitives([], tmp_path / "e.obj")
    export_primitives([], tmp_path / "e.json")
    assert read_obj(tmp_path / "e.obj")[0].shape == (0, 3)
    assert json.loads((tmp_path / "e.json").read_text()) == []


def test_json_roundtrip(tmp_path, rng):
    from primseg.primitives import random_rotation
    params = [PrimitiveParams(k, rng.normal(size=3), random_rotation(rng),
                              np.sort(rng.uniform(0.1, 2, 3))[::-1]) for k in ("ellipsoid", "cuboid")]
    export_primitives(params, tmp_path / "p.json")
    back = load_primitives_json(tmp_path / "p.json")
    for a, b in zip(params, back):
        assert a.kind == b.kind
        for f in ("center", "rotation", "semi_axes"):
            np.testing.assert_allclose(getattr(b, f), getattr(a, f), atol=1e-9)
    doc = json.loads((tmp_path / "p.json").read_text())
    np.testing.assert_allclose(np.array(doc[0]["rotation"]).reshape(3, 3), params[0].rotation)


def test_cuboid_obj_is_a_box(tmp_path):
    export_primitives([PrimitiveParams("cuboid", np.zeros(3), np.eye(3), [2, 1, 0.5])],
                      tmp_path / "b.obj")
    verts, faces, _ = read_obj(tmp_path / "b.obj")
    np.testing.assert_allclose(np.sort(np.unique(np.abs(verts), axis=0), axis=0)[0], [2, 1, 0.5])
    assert len(faces) == 12
