"""Primitive parameter containers shared by fitting, sampling and export."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor

KINDS = ("ellipsoid", "cuboid")
THOMSEN_P = 1.6075


@dataclass(frozen=True)
class PrimitiveParams:
    """Value snapshot of one primitive.

    ``rotation`` columns are the principal axes, so a world point ``x`` maps to
    local coordinates ``rotation.T @ (x - center)``.  For cuboids
    ``semi_axes`` are half-extents.
    """

    kind: str
    center: np.ndarray
    rotation: np.ndarray
    semi_axes: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        axes = np.asarray(self.semi_axes, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(center)) and np.all(np.isfinite(rotation))
                and np.all(np.isfinite(axes))):
            raise ValueError("primitive parameters must be finite")
        if np.any(axes <= 0):
            raise ValueError(f"semi-axes must be positive, got {axes}")
        if np.linalg.norm(rotation.T @ rotation - np.eye(3)) > 1e-6:
            raise ValueError("rotation is not orthogonal")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "semi_axes", axes)

    @classmethod
    def sphere(cls, center=(0.0, 0.0, 0.0), radius=1.0, kind="ellipsoid"):
        return cls(kind, np.asarray(center, float), np.eye(3), np.full(3, float(radius)))

    def canonical(self):
        """Same solid with semi-axes sorted descending."""
        order = np.argsort(-self.semi_axes, kind="stable")
        rot = self.rotation[:, order]
        if np.linalg.det(rot) < 0:
            rot = rot.copy()
            rot[:, 2] *= -1.0
        return PrimitiveParams(self.kind, self.center, rot, self.semi_axes[order])

    def with_kind(self, kind):
        return PrimitiveParams(kind, self.center, self.rotation, self.semi_axes)

    def surface_area(self):
        return surface_area(self.kind, self.semi_axes)

    def to_dict(self):
        return {
            "center": [float(x) for x in self.center],
            "rotation": [float(x) for x in self.rotation.reshape(-1)],
            "semi_axes": [float(x) for x in self.semi_axes],
            "kind": self.kind,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], np.asarray(d["center"], float),
                   np.asarray(d["rotation"], float).reshape(3, 3),
                   np.asarray(d["semi_axes"], float))


@dataclass
class Primitive:
    """Graph-attached primitive: tensors for center, rotation and semi-axes."""

    kind: str
    center: Tensor
    rotation: Tensor
    semi_axes: Tensor

    @classmethod
    def constant(cls, params: PrimitiveParams, dtype=np.float64):
        return cls(params.kind, Tensor(params.center, dtype=dtype),
                   Tensor(params.rotation, dtype=dtype), Tensor(params.semi_axes, dtype=dtype))

    def values(self) -> PrimitiveParams:
        return PrimitiveParams(self.kind, self.center.data, self.rotation.data, self.semi_axes.data)


def as_primitive(p, dtype=np.float64):
    return p if isinstance(p, Primitive) else Primitive.constant(p, dtype)


def surface_area(kind, semi_axes):
    """Surface area; ellipsoids use the Knud Thomsen approximation."""
    a, b, c = (float(x) for x in semi_axes)
    if kind == "cuboid":
        return 8.0 * (a * b + a * c + b * c)
    p = THOMSEN_P
    return 4.0 * np.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3.0) ** (1.0 / p)


def random_rotation(rng):
    """Uniformly distributed proper rotation matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] *= -1.0
    return q
