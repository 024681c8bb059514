"""Alternating self-supervised / supervised training of the embedder."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autograd import Tensor, backward
from .embedder import ClassifierParams, EmbedderParams, Model, classify, embed, substream
from .fitting import FitConfig, UnfittableShapeError
from .losses import cross_entropy, total_loss
from .meanshift import BandwidthConfig, DegenerateEmbeddingError
from .pipeline import PipelineConfig, ssl_forward


class TrainingDivergedError(FloatingPointError):
    """The total loss became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    batch_unlabeled: int = 1
    labeled_k: int = 5
    learning_rate: float = 0.02
    optimizer: str = "momentum"      # "momentum" (0.9) or "sgd"
    momentum: float = 0.9
    seed: int = 0
    warmup_fraction: float = 0.1
    primitive_kind: str = "ellipsoid"
    hidden: int = 64
    dim: int = 32
    surface_samples: int = 2000
    interior_samples: int = 128
    neighbor_rank: int = 100
    max_grad_norm: float = 1.0
    sharp_membership: bool = False
    kappa: float = FitConfig.kappa
    ssl_weight: float = 1.0
    ssl: bool = True
    supervised: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("momentum", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1]")
        if self.primitive_kind not in ("ellipsoid", "cuboid"):
            raise ValueError(f"unknown primitive kind {self.primitive_kind!r}")
        if self.batch_unlabeled < 1 or self.labeled_k < 1:
            raise ValueError("batch_unlabeled and labeled_k must be >= 1")
        if not self.max_grad_norm > 0:
            raise ValueError("max_grad_norm must be positive")
        if not self.ssl_weight >= 0:
            raise ValueError("ssl_weight must be >= 0")

    @property
    def warmup_steps(self):
        return int(math.ceil(self.warmup_fraction * self.steps))

    def pipeline(self):
        bw = BandwidthConfig(neighbor_rank=self.neighbor_rank, sharp_membership=self.sharp_membership)
        return PipelineConfig(bandwidth=bw, fit=FitConfig(kappa=self.kappa),
                              kind=self.primitive_kind, surface_samples=self.surface_samples,
                              interior_samples=self.interior_samples)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown training options: {sorted(extra)}")
        return cls(**d)


def pipeline_for(model, **overrides):
    """Pipeline settings a checkpoint was trained with (defaults otherwise)."""
    tc = getattr(model, "meta", {}).get("train_config")
    cfg = TrainConfig.from_dict(tc).pipeline() if tc else PipelineConfig()
    return replace(cfg, **overrides)


@dataclass
class TrainResult:
    model: Model
    log: list = field(default_factory=list)

    def log_lines(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.log)


class Momentum:
    """Heavy-ball update ``v = mu v + g; p -= lr v`` (``mu = 0`` is plain descent)."""

    def __init__(self, lr, mu):
        self.lr, self.mu = lr, mu
        self.velocity = {}

    def step(self, params, grads):
        for k, g in grads.items():
            v = self.velocity.get(k)
            v = g if v is None or self.mu == 0 else self.mu * v + g
            self.velocity[k] = v
            with np.errstate(over="ignore", invalid="ignore"):
                params[k] -= (self.lr * v).astype(params[k].dtype)
            if not np.all(np.isfinite(params[k])):
                raise TrainingDivergedError(f"parameter {k} became non-finite")


def clip_by_global_norm(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if not math.isfinite(norm):
        raise TrainingDivergedError("non-finite gradient")
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def _leaf(arr):
    return Tensor(arr, requires_grad=True)


def label_vocabulary(clouds):
    values = sorted({int(v) for pc in clouds for v in np.unique(pc.labels)})
    if not values:
        raise ValueError("labeled set has no labels")
    return values


def _encode(labels, vocab):
    lut = {v: i for i, v in enumerate(vocab)}
    try:
        return np.fromiter((lut[int(v)] for v in labels), dtype=np.int64, count=len(labels))
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]} is not in the training vocabulary") from None


def _check(value, step, phase):
    if not math.isfinite(value):
        raise TrainingDivergedError(f"total loss is {value} at step {step} ({phase})")


def train(unlabeled, labeled, cfg: TrainConfig = TrainConfig(), log_fn=None, init=None):
    """Train embedder + classifier; returns :class:`TrainResult`.

    Each step runs one self-supervised update on ``batch_unlabeled`` shapes
    drawn from ``unlabeled`` followed by one supervised update on one shape
    drawn from ``labeled``.  Either half can be switched off through
    ``cfg.ssl`` / ``cfg.supervised`` (the supervised-only baseline).
    ``init`` optionally supplies a :class:`Model` to start from; its
    classifier is reused when the label vocabulary matches.
    """
    unlabeled, labeled = list(unlabeled), list(labeled)
    if cfg.supervised and not labeled:
        raise ValueError("supervised training needs a non-empty labeled set")
    if cfg.ssl and not unlabeled:
        raise ValueError("self-supervised training needs a non-empty unlabeled set")
    if any(not pc.has_labels for pc in labeled):
        raise ValueError("every labeled shape must carry labels")
    names = {pc.name for pc in unlabeled if pc.name}
    overlap = names & {pc.name for pc in labeled if pc.name}
    if overlap:
        raise ValueError(f"unlabeled and labeled sets overlap: {sorted(overlap)[:3]}")

    dtype = np.dtype(cfg.dtype)
    vocab = label_vocabulary(labeled) if labeled else [0]
    if init is None:
        emb = EmbedderParams.init(cfg.hidden, cfg.dim, seed=cfg.seed, dtype=dtype)
    else:
        if (init.embedder.hidden, init.embedder.dim) != (cfg.hidden, cfg.dim):
            raise ValueError("initial model does not match the configured hidden/dim sizes")
        emb = init.embedder.astype(dtype)
    if init is not None and list(init.label_values) == vocab:
        clf = ClassifierParams(init.classifier.weight.astype(dtype), init.classifier.bias.astype(dtype))
    else:
        clf = ClassifierParams.init(cfg.dim, len(vocab), seed=cfg.seed, dtype=dtype)
    params = dict(emb.arrays)
    params.update(clf.arrays)
    mu = cfg.momentum if cfg.optimizer == "momentum" else 0.0
    opt_ssl = Momentum(cfg.learning_rate * cfg.ssl_weight, mu)
    opt_sl = Momentum(cfg.learning_rate, mu)
    pcfg = cfg.pipeline()
    rng_u = substream(cfg.seed, "ssl-batches")
    rng_l = substream(cfg.seed, "sl-batches")
    rng_s = substream(cfg.seed, "sampling")
    encoded = [_encode(pc.labels, vocab) for pc in labeled]
    log = []

    def emit(rec):
        log.append(rec)
        if log_fn is not None:
            log_fn(rec)

    emb_keys = list(emb.arrays)
    for step in range(cfg.steps):
        warm = step < cfg.warmup_steps
        if cfg.ssl:
            batch = rng_u.choice(len(unlabeled), size=min(cfg.batch_unlabeled, len(unlabeled)),
                                 replace=False)
            seeds = rng_s.integers(0, 2**31, size=len(batch))
            acc = {k: np.zeros_like(params[k], dtype=np.float64) for k in emb_keys}
            used = 0
            for i, s in zip(batch, seeds):
                pc = unlabeled[int(i)]
                t = {k: _leaf(params[k]) for k in emb_keys}
                try:
                    f = ssl_forward(pc.points, t, pcfg, seed=int(s), warmup=warm)
                except (UnfittableShapeError, DegenerateEmbeddingError) as exc:
                    emit({"step": step, "phase": "ssl", "shape": pc.name, "skipped": str(exc)})
                    continue
                _check(f.breakdown.total, step, "ssl")
                g = backward(f.total, t)
                for k in emb_keys:
                    acc[k] += g[k]
                used += 1
                rec = f.breakdown.log_record(step, pc.name)
                rec.update(phase="ssl", primitives=len(f.fits), warmup=warm)
                emit(rec)
            if used:
                grads, _ = clip_by_global_norm({k: v / used for k, v in acc.items()},
                                               cfg.max_grad_norm)
                opt_ssl.step(params, grads)
        if cfg.supervised:
            j = int(rng_l.integers(len(labeled)))
            pc = labeled[j]
            t = {k: _leaf(v) for k, v in params.items()}
            z = embed(pc.points, {k: t[k] for k in emb_keys})
            ce = cross_entropy(classify(z, t), encoded[j])
            total, bd = total_loss(ce=ce, labeled=True)
            _check(bd.total, step, "sl")
            grads, _ = clip_by_global_norm(backward(total, t), cfg.max_grad_norm)
            opt_sl.step(params, grads)
            rec = bd.log_record(step, pc.name)
            rec.update(phase="sl")
            emit(rec)

    emb_out = EmbedderParams(cfg.hidden, cfg.dim, {k: params[k] for k in emb_keys})
    clf_out = ClassifierParams(params["cls.w"], params["cls.b"])
    meta = {"train_config": asdict(cfg), "steps_done": cfg.steps}
    return TrainResult(Model(emb_out, clf_out, vocab, meta), log)

