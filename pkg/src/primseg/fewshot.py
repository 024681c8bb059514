"""Synthetic few-shot part-segmentation benchmark.

Each category is a template of four ellipsoidal parts.  Every shape jitters
part sizes and gaps, applies a random rotation and is normalised to the unit
ball.  Part ``p`` of category ``c`` carries the global label ``4 c + p``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedder import substream
from .primitives import PrimitiveParams, random_rotation
from .shapes import SyntheticSpec, generate_synthetic, normalize

PARTS_PER_CATEGORY = 4

# (semi-axes, placement direction) per part; parts are laid out outward from
# the first one along their direction with a jittered gap.
TEMPLATES = {
    "stack": [((0.9, 0.9, 0.2), (0, 0, 0)), ((0.35, 0.35, 0.35), (0, 0, 1)),
              ((0.2, 0.2, 0.8), (0, 0, 1)), ((0.6, 0.6, 0.3), (0, 0, 1))],
    "cross": [((0.5, 0.5, 0.5), (0, 0, 0)), ((0.9, 0.15, 0.15), (1, 0, 0)),
              ((0.4, 0.3, 0.3), (-1, 0, 0)), ((0.5, 0.5, 0.12), (0, 0, 1))],
    "fan": [((0.7, 0.25, 0.25), (0, 0, 0)), ((0.25, 0.7, 0.08), (0, 1, 0)),
            ((0.35, 0.35, 0.35), (0, -1, 0)), ((0.2, 0.2, 0.45), (0, 0, -1))],
}
CATEGORIES = tuple(TEMPLATES)


@dataclass
class FewShotBenchmark:
    unlabeled: list
    labeled: list
    test: list
    categories: tuple = CATEGORIES
    meta: dict = field(default_factory=dict)


def _rotation(rng, rotate):
    if rotate == "full":
        return random_rotation(rng)
    if rotate == "yaw":
        t = rng.uniform(-np.pi, np.pi)
        c, s = np.cos(t), np.sin(t)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    if rotate == "none":
        return np.eye(3)
    raise ValueError(f"unknown rotation mode {rotate!r}")


def category_spec(category, rng, points_per_shape=512, jitter=0.25, rotate="yaw", name=""):
    """Randomised :class:`SyntheticSpec` for one shape of ``category``."""
    template = TEMPLATES[category]
    parts = []
    anchor = np.zeros(3)
    base_axes = None
    for k, (axes, direction) in enumerate(template):
        a = np.asarray(axes) * rng.uniform(1.0 - jitter, 1.0 + jitter, size=3)
        direction = np.asarray(direction, dtype=np.float64)
        if k == 0:
            center = anchor
            base_axes = a
        else:
            gap = rng.uniform(0.1, 0.3)
            center = anchor + direction * (np.max(base_axes) + np.max(a) + gap)
            if category == "stack":
                anchor, base_axes = center, a
        parts.append((a, center))
    rot = _rotation(rng, rotate)
    offset = np.mean([c for _, c in parts], axis=0)
    params = [PrimitiveParams("ellipsoid", rot @ (c - offset), rot, a) for a, c in parts]
    return SyntheticSpec(params, points_per_shape, int(rng.integers(2**31)), separated=True,
                         name=name)


def make_shape(category, rng, points_per_shape=512, name="", **kw):
    c = CATEGORIES.index(category)
    pc = normalize(generate_synthetic(category_spec(category, rng, points_per_shape, name=name, **kw)))
    pc.labels = pc.labels + PARTS_PER_CATEGORY * c
    return pc


def few_shot_benchmark(seed=0, unlabeled=200, k=5, test_per_class=10, points_per_shape=512,
                       rotate="yaw", jitter=0.25):
    """Disjoint unlabeled / labeled (``k`` per category) / test splits."""
    rng = substream(seed, "synth")
    cats = list(CATEGORIES)

    def batch(prefix, count_per_cat):
        out = []
        for c in cats:
            for i in range(count_per_cat):
                out.append(make_shape(c, rng, points_per_shape, name=f"{prefix}-{c}-{i:03d}",
                                      rotate=rotate, jitter=jitter))
        return out

    per_cat = int(np.ceil(unlabeled / len(cats)))
    pool = batch("unlabeled", per_cat)[:unlabeled]
    for pc in pool:
        pc.labels = None
    return FewShotBenchmark(pool, batch("labeled", k), batch("test", test_per_class),
                            meta={"seed": seed, "k": k, "points_per_shape": points_per_shape})
