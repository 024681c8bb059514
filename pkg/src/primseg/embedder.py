"""Per-point embedding network and per-point classifier head.

The embedder is a shared point-wise MLP with a max-pooled global branch;
all activations are tanh so every path is smooth except the pooling argmax.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor, constant

CHECKPOINT_FORMAT = "primseg-checkpoint"


def substream(seed, name):
    """Independent RNG stream derived from one seed and a stream name."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def _uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class EmbedderParams:
    hidden: int
    dim: int
    arrays: dict = field(default_factory=dict)

    LAYERS = ("point1", "point2", "pool", "fuse1", "fuse2")

    @classmethod
    def init(cls, hidden=64, dim=32, seed=0, dtype=np.float32):
        rng = substream(seed, "embed-init")
        h, d = hidden, dim
        shapes = {
            "point1": (3, h),
            "point2": (h, h),
            "pool": (h, h),
            "fuse1": (2 * h, h),
            "fuse2": (h, d),
        }
        arrays = {}
        for name in cls.LAYERS:
            fan_in, fan_out = shapes[name]
            arrays[f"{name}.w"] = _uniform_init(rng, fan_in, (fan_in, fan_out)).astype(dtype)
            arrays[f"{name}.b"] = _uniform_init(rng, fan_in, (fan_out,)).astype(dtype)
        return cls(hidden, dim, arrays)

    def validate(self):
        h, d = self.hidden, self.dim
        want = {"point1.w": (3, h), "point2.w": (h, h), "pool.w": (h, h),
                "fuse1.w": (2 * h, h), "fuse2.w": (h, d)}
        for name, shape in want.items():
            if self.arrays[name].shape != shape:
                raise ValueError(f"{name} has shape {self.arrays[name].shape}, expected {shape}")
            if self.arrays[name.replace(".w", ".b")].shape != (shape[1],):
                raise ValueError(f"bias of {name} does not match")
        for name, arr in self.arrays.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite embedder parameter {name}")

    def tensors(self, requires_grad=True):
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def astype(self, dtype):
        return EmbedderParams(self.hidden, self.dim, {k: v.astype(dtype) for k, v in self.arrays.items()})


@dataclass
class ClassifierParams:
    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def init(cls, dim, classes, seed=0, dtype=np.float32, zero=False):
        if zero:
            return cls(np.zeros((dim, classes), dtype), np.zeros(classes, dtype))
        rng = substream(seed, "classifier-init")
        return cls(_uniform_init(rng, dim, (dim, classes)).astype(dtype),
                   _uniform_init(rng, dim, (classes,)).astype(dtype))

    @property
    def classes(self):
        return self.weight.shape[1]

    @property
    def arrays(self):
        return {"cls.w": self.weight, "cls.b": self.bias}

    def tensors(self, requires_grad=True):
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}


def _get(params, name):
    if isinstance(params, EmbedderParams):
        return Tensor(params.arrays[name])
    return params[name]


def embed(points, params):
    """Unit-norm per-point embeddings (N, D).

    ``params`` is an :class:`EmbedderParams` (constants) or the dict returned
    by :meth:`EmbedderParams.tensors` (differentiable).
    """
    if isinstance(params, EmbedderParams):
        params.validate()
    w = {k: _get(params, k) for k in (params.arrays if isinstance(params, EmbedderParams) else params)}
    x = constant(points, w["point1.w"])
    if x.dtype != w["point1.w"].dtype:
        x = Tensor(x.data.astype(w["point1.w"].dtype))
    h = w["point1.w"].shape[1]
    h1 = (x @ w["point1.w"] + w["point1.b"]).tanh()
    h2 = (h1 @ w["point2.w"] + w["point2.b"]).tanh()
    pooled = (h2 @ w["pool.w"] + w["pool.b"]).tanh().max(axis=0, keepdims=True)
    fuse_w = w["fuse1.w"]
    f = (h2 @ fuse_w[:h] + pooled @ fuse_w[h:] + w["fuse1.b"]).tanh()
    z = f @ w["fuse2.w"] + w["fuse2.b"]
    return z / (z * z).sum(axis=1, keepdims=True).sqrt()


def classify(z, params, clamp=50.0):
    """Per-point class probabilities (N, C) from embeddings."""
    if isinstance(params, ClassifierParams):
        params = {k: Tensor(v) for k, v in params.arrays.items()}
    wt, b = params["cls.w"], params["cls.b"]
    if z.shape[1] != wt.shape[0]:
        raise ValueError(f"embedding dim {z.shape[1]} does not match classifier {wt.shape[0]}")
    logits = z @ wt + b
    shift = Tensor(np.max(logits.data, axis=1, keepdims=True))
    return (logits - shift).clamp(-clamp, clamp).softmax(axis=1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _pack(arr):
    return {"shape": list(arr.shape), "dtype": str(arr.dtype),
            "data": [float(x) for x in np.asarray(arr).reshape(-1)]}


def _unpack(d):
    return np.asarray(d["data"], dtype=d.get("dtype", "float64")).reshape(d["shape"])


@dataclass
class Model:
    """Embedder + classifier + the global label vocabulary used to train it."""

    embedder: EmbedderParams
    classifier: ClassifierParams
    label_values: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_json(self):
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": 1,
            "embedder": {
                "hidden": self.embedder.hidden,
                "dim": self.embedder.dim,
                "params": {k: _pack(v) for k, v in sorted(self.embedder.arrays.items())},
            },
            "classifier": {k: _pack(v) for k, v in sorted(self.classifier.arrays.items())},
            "label_values": [int(x) for x in self.label_values],
            "meta": self.meta,
        }
        return json.dumps(doc, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a primseg checkpoint")
        e = doc["embedder"]
        emb = EmbedderParams(e["hidden"], e["dim"], {k: _unpack(v) for k, v in e["params"].items()})
        emb.validate()
        c = doc["classifier"]
        clf = ClassifierParams(_unpack(c["cls.w"]), _unpack(c["cls.b"]))
        return cls(emb, clf, doc.get("label_values", []), doc.get("meta", {}))

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())

    def predict_labels(self, points):
        """Argmax class per point mapped back to the file label values."""
        from .autograd import no_grad
        with no_grad():
            probs = classify(embed(points, self.embedder), self.classifier).data
        idx = np.argmax(probs, axis=1)
        if self.label_values:
            return np.asarray(self.label_values)[idx]
        return idx
