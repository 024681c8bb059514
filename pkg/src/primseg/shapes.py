"""Point-cloud files, normalisation, synthetic shapes and primitive export."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .primitives import PrimitiveParams, random_rotation, surface_area
from .sdf import allocate_counts, ellipsoid_direction, sample_cuboid_faces, sample_ellipsoid_uv

FLOAT_FMT = "%.9g"


class PointCloudFormatError(ValueError):
    """Malformed point-cloud file; the message names the offending line."""


@dataclass
class PointCloud:
    points: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {self.points.shape}")
        if len(self.points) < 1:
            raise ValueError("point cloud is empty")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.points),):
                raise ValueError("labels must have one entry per point")

    def __len__(self):
        return len(self.points)

    @property
    def has_labels(self):
        return self.labels is not None


# ---------------------------------------------------------------------------
# reading / writing
# ---------------------------------------------------------------------------

def _detect_format(path):
    ext = Path(path).suffix.lower()
    if ext == ".ply":
        return "ply_ascii"
    return "xyz"


def _parse_xyz(lines):
    pts, labels = [], []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) not in (3, 4):
            raise PointCloudFormatError(f"line {lineno}: expected 'x y z [label]', got {line!r}")
        try:
            pts.append([float(t) for t in tok[:3]])
            if len(tok) == 4:
                labels.append(int(tok[3]))
        except ValueError as exc:
            raise PointCloudFormatError(f"line {lineno}: {exc}") from None
    if labels and len(labels) != len(pts):
        raise PointCloudFormatError("labels present on some lines but not all")
    return pts, labels


def _parse_ply(lines):
    if not lines or lines[0].strip() != "ply":
        raise PointCloudFormatError("line 1: missing 'ply' magic")
    n_vertex = None
    props = []
    in_vertex = False
    header_end = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok:
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise PointCloudFormatError(f"line {lineno}: only ascii PLY is supported")
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            header_end = lineno
            break
    if header_end is None or n_vertex is None:
        raise PointCloudFormatError("PLY header lacks a vertex element or end_header")
    for axis in "xyz":
        if axis not in props:
            raise PointCloudFormatError(f"PLY vertex element lacks property {axis!r}")
    ix, iy, iz = (props.index(a) for a in "xyz")
    il = props.index("label") if "label" in props else None
    pts, labels = [], []
    body = lines[header_end:header_end + n_vertex]
    if len(body) < n_vertex:
        raise PointCloudFormatError(f"line {header_end + len(body) + 1}: expected {n_vertex} vertices")
    for offset, raw in enumerate(body):
        lineno = header_end + 1 + offset
        tok = raw.split()
        if len(tok) < len(props):
            raise PointCloudFormatError(f"line {lineno}: expected {len(props)} values")
        try:
            pts.append([float(tok[ix]), float(tok[iy]), float(tok[iz])])
            if il is not None:
                labels.append(int(tok[il]))
        except ValueError as exc:
            raise PointCloudFormatError(f"line {lineno}: {exc}") from None
    return pts, labels


def load_pointcloud(path, format=None) -> PointCloud:
    """Read an XYZ (``x y z [label]`` per line) or ASCII PLY file."""
    path = Path(path)
    fmt = format or _detect_format(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if fmt == "xyz":
        pts, labels = _parse_xyz(lines)
    elif fmt in ("ply", "ply_ascii"):
        pts, labels = _parse_ply(lines)
    else:
        raise ValueError(f"unknown point-cloud format {fmt!r}")
    if not pts:
        raise PointCloudFormatError(f"{path}: point cloud is empty")
    return PointCloud(np.array(pts), np.array(labels) if labels else None, path.stem)


def save_pointcloud(pc: PointCloud, path, format=None):
    path = Path(path)
    fmt = format or _detect_format(path)
    rows = []
    for i, p in enumerate(pc.points):
        row = " ".join(FLOAT_FMT % v for v in p)
        if pc.labels is not None:
            row += f" {int(pc.labels[i])}"
        rows.append(row)
    if fmt in ("ply", "ply_ascii"):
        header = ["ply", "format ascii 1.0", f"element vertex {len(pc)}",
                  "property float x", "property float y", "property float z"]
        if pc.labels is not None:
            header.append("property uint label")
        header.append("end_header")
        rows = header + rows
    elif fmt != "xyz":
        raise ValueError(f"unknown point-cloud format {fmt!r}")
    path.write_text("\n".join(rows) + "\n")


def load_directory(path):
    """All ``.xyz``/``.ply`` clouds of a directory, sorted by file name."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"not a directory: {path}")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".xyz", ".ply"))
    return [load_pointcloud(p) for p in files]


def normalize(pc: PointCloud) -> PointCloud:
    """Center at the centroid and scale so the farthest point has norm 1."""
    centered = pc.points - pc.points.mean(axis=0)
    scale = np.sqrt(np.max(np.sum(centered * centered, axis=1)))
    if not scale > 1e-12:
        raise ValueError("cannot normalize: all points coincide")
    return PointCloud(centered / scale, None if pc.labels is None else pc.labels.copy(), pc.name)


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    part_params: list
    points_per_shape: int = 2048
    seed: int = 0
    separated: bool = False
    name: str = "synthetic"

    @property
    def part_count(self):
        return len(self.part_params)

    def validate(self):
        if self.part_count < 1:
            raise ValueError("synthetic spec needs at least one part")
        if self.points_per_shape < self.part_count:
            raise ValueError("fewer points than parts")
        for p in self.part_params:
            if not isinstance(p, PrimitiveParams):
                raise TypeError("part_params must be PrimitiveParams")
            if np.any(p.semi_axes <= 0):
                raise ValueError("zero semi-axis in synthetic spec")
        if self.separated and not parts_separated(self.part_params):
            raise ValueError("parts overlap but spec requests separated mode")


def parts_separated(parts):
    for i in range(len(parts)):
        for j in range(i + 1, len(parts)):
            gap = np.linalg.norm(parts[i].center - parts[j].center)
            reach = _reach(parts[i]) + _reach(parts[j])
            if not gap > reach:
                return False
    return True


def _reach(p):
    if p.kind == "cuboid":
        return float(np.linalg.norm(p.semi_axes))
    return float(np.max(p.semi_axes))


def sample_part_surface(params: PrimitiveParams, count, rng):
    """Plain-array near-uniform surface samples of one primitive (world frame)."""
    if params.kind == "ellipsoid":
        u, v = sample_ellipsoid_uv(params.semi_axes, count, rng)
        unit = ellipsoid_direction(u, v)
    else:
        unit, _, _ = sample_cuboid_faces(params.semi_axes, count, rng)
    return (unit * params.semi_axes) @ params.rotation.T + params.center


def generate_synthetic(spec: SyntheticSpec) -> PointCloud:
    """Sample the union of part surfaces; label = part index."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    areas = [surface_area(p.kind, p.semi_axes) for p in spec.part_params]
    counts = allocate_counts(areas, spec.points_per_shape)
    pts, labels = [], []
    for k, (part, n) in enumerate(zip(spec.part_params, counts)):
        pts.append(sample_part_surface(part, int(n), rng))
        labels.append(np.full(int(n), k, dtype=np.int64))
    pts = np.concatenate(pts)
    labels = np.concatenate(labels)
    perm = rng.permutation(len(pts))
    return PointCloud(pts[perm], labels[perm], spec.name)


def random_separated_spec(part_count, seed, points_per_shape=2048, kind="ellipsoid",
                          axis_range=(0.15, 0.45), spread=1.0, max_tries=1000):
    """Random non-overlapping parts with random orientations."""
    rng = np.random.default_rng([seed, 7919])
    parts = []
    tries = 0
    while len(parts) < part_count:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("could not place separated parts; enlarge spread")
        axes = np.sort(rng.uniform(*axis_range, size=3))[::-1]
        center = rng.uniform(-spread, spread, size=3)
        cand = PrimitiveParams(kind, center, random_rotation(rng), axes)
        if parts_separated(parts + [cand]):
            parts.append(cand)
    return SyntheticSpec(parts, points_per_shape, seed, separated=True,
                         name=f"sep{part_count}_{seed:04d}")


# ---------------------------------------------------------------------------
# primitive export
# ---------------------------------------------------------------------------

def _fmt(v):
    return FLOAT_FMT % v


def uv_sphere(segments=32, rings=16):
    """Unit UV-sphere: ``(rings+1) * segments`` vertices, ``2 * rings * segments``
    triangles (the pole rows are collapsed quads)."""
    v = np.linspace(0.0, np.pi, rings + 1)
    u = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    uu, vv = np.meshgrid(u, v)
    verts = ellipsoid_direction(uu.ravel(), vv.ravel())
    faces = []
    for r in range(rings):
        for s in range(segments):
            a = r * segments + s
            b = r * segments + (s + 1) % segments
            c = (r + 1) * segments + s
            d = (r + 1) * segments + (s + 1) % segments
            faces.append((a, c, b))
            faces.append((b, c, d))
    return verts, np.array(faces, dtype=np.int64)


def unit_box():
    verts = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = []
    for a, b, c, d in quads:
        faces.append((a, b, c))
        faces.append((a, c, d))
    return verts, np.array(faces, dtype=np.int64)


def primitive_mesh(params: PrimitiveParams, segments=32, rings=16):
    if params.kind == "ellipsoid":
        verts, faces = uv_sphere(segments, rings)
    else:
        verts, faces = unit_box()
    return (verts * params.semi_axes) @ params.rotation.T + params.center, faces


def export_primitives(params, path, format=None, segments=32, rings=16):
    """Write primitives as a triangulated OBJ (one group each) or a JSON array."""
    path = Path(path)
    fmt = format or path.suffix.lower().lstrip(".")
    if fmt == "json":
        # JSON keeps full float precision so it round-trips exactly
        path.write_text(json.dumps([p.to_dict() for p in params], indent=1) + "\n")
        return
    if fmt != "obj":
        raise ValueError(f"unknown primitive export format {fmt!r}")
    lines = []
    base = 1
    for i, p in enumerate(params):
        verts, faces = primitive_mesh(p, segments, rings)
        lines.append(f"g primitive_{i}_{p.kind}")
        lines.extend("v " + " ".join(_fmt(c) for c in vtx) for vtx in verts)
        lines.extend("f " + " ".join(str(base + k) for k in f) for f in faces)
        base += len(verts)
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def load_primitives_json(path):
    with open(path) as fh:
        return [PrimitiveParams.from_dict(d) for d in json.load(fh)]


def read_obj(path):
    """Minimal OBJ reader (vertices, faces, group names) for checks."""
    verts, faces, groups = [], [], []
    with open(path) as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(t) for t in tok[1:4]])
            elif tok[0] == "f":
                faces.append([int(t.split("/")[0]) for t in tok[1:]])
            elif tok[0] == "g":
                groups.append(tok[1])
    return np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3), groups


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
