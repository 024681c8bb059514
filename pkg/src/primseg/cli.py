"""Command-line interface: decompose, train, eval, gradcheck, synth.

Exit codes: 0 success, 1 input/IO error, 2 unfittable shape, 3 training
diverged, 4 gradient check failed.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_IO, EXIT_UNFITTABLE, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, message, code=EXIT_IO):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the input-error code rather than argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_IO, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return v


def _common(p):
    p.add_argument("--seed", type=int, default=None, help="master random seed (default 0)")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="upper bound on worker threads (BLAS and compiled kernels)")
    p.add_argument("--config", type=Path, default=None,
                   help="JSON file of option defaults; explicit flags override it")


def build_parser():
    parser = _Parser(prog="primseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    d = sub.add_parser("decompose", help="fit primitives to one point cloud")
    d.add_argument("input", type=Path, help="point cloud (.xyz or ASCII .ply)")
    d.add_argument("--primitive", choices=("ellipsoid", "cuboid"), default=None,
                   help="primitive kind (default ellipsoid)")
    d.add_argument("--checkpoint", type=Path, default=None,
                   help="trained model JSON; a random initialisation is used if omitted")
    d.add_argument("--out-obj", type=Path, default=None, help="write primitive meshes here")
    d.add_argument("--out-json", type=Path, default=None, help="write primitive parameters here")
    d.add_argument("--surface-samples", type=_positive_int, default=None,
                   help="surface samples for the fit loss (default 10000)")
    _common(d)

    t = sub.add_parser("train", help="semi-supervised training")
    t.add_argument("--unlabeled", type=Path, default=None, help="directory of unlabeled clouds")
    t.add_argument("--labeled", type=Path, default=None, help="directory of labeled clouds")
    t.add_argument("--k", type=_positive_int, default=None,
                   help="labeled shapes used per category (default 5)")
    t.add_argument("--steps", type=_nonneg_int, default=None, help="training steps (default 300)")
    t.add_argument("--out", type=Path, required=True, help="checkpoint path to write")
    t.add_argument("--log", type=Path, default=None,
                   help="JSON-lines log path (default: checkpoint path + .log.jsonl)")
    t.add_argument("--lr", type=_positive_float, default=None, help="learning rate")
    t.add_argument("--optimizer", choices=("momentum", "sgd"), default=None,
                   help="momentum 0.9 or plain gradient descent")
    t.add_argument("--batch-unlabeled", type=_positive_int, default=None,
                   help="unlabeled shapes per self-supervised step")
    t.add_argument("--warmup-fraction", type=float, default=None,
                   help="fraction of steps using the similarity loss (default 0.1)")
    t.add_argument("--primitive", choices=("ellipsoid", "cuboid"), default=None,
                   help="primitive kind for the reconstruction losses")
    t.add_argument("--supervised-only", action="store_true", default=None,
                   help="skip the self-supervised updates (baseline)")
    t.add_argument("--no-supervised", action="store_true", default=None,
                   help="skip the supervised updates (self-supervision only)")
    _common(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on labeled shapes")
    e.add_argument("--checkpoint", type=Path, required=True, help="trained model JSON")
    e.add_argument("--test", type=Path, required=True, help="directory of labeled test clouds")
    e.add_argument("--report", type=Path, required=True, help="EvalReport JSON to write")
    _common(e)

    g = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    g.add_argument("--report", type=Path, default=None, help="write the JSON report here")
    g.add_argument("--inject-broken-op", action="append", default=None, metavar="NAME",
                   help="test hook: corrupt the gradient of this registered case")
    _common(g)

    s = sub.add_parser("synth", help="write synthetic labeled point clouds")
    s.add_argument("--out-dir", type=Path, required=True, help="output directory")
    s.add_argument("--spec", type=Path, default=None,
                   help="JSON list of parts {kind, center, rotation, semi_axes}")
    s.add_argument("--parts", type=_positive_int, default=None,
                   help="random separated parts per shape (default 3)")
    s.add_argument("--count", type=_positive_int, default=None, help="shapes to write (default 1)")
    s.add_argument("--points", type=_positive_int, default=None,
                   help="points per shape (default 2048)")
    s.add_argument("--format", choices=("xyz", "ply"), default=None, help="file format")
    s.add_argument("--benchmark", action="store_true", default=None,
                   help="write the few-shot benchmark (unlabeled/, labeled/, test/)")
    s.add_argument("--k", type=_positive_int, default=None,
                   help="labeled shapes per category for --benchmark (default 5)")
    s.add_argument("--unlabeled", type=_positive_int, default=None,
                   help="unlabeled shapes for --benchmark (default 200)")
    _common(s)
    return parser


DEFAULTS = {
    "seed": 0, "threads": None, "primitive": "ellipsoid", "surface_samples": 10_000,
    "k": None, "steps": None, "lr": None, "optimizer": None, "batch_unlabeled": None,
    "warmup_fraction": None, "supervised_only": False, "no_supervised": False,
    "parts": 3, "count": 1, "points": 2048, "format": "xyz", "benchmark": False,
    "unlabeled": None, "labeled": None, "inject_broken_op": None,
}


def resolve_options(args):
    """Merge built-in defaults < config file < explicit flags."""
    opts = dict(DEFAULTS)
    if args.config is not None:
        try:
            cfg = json.loads(args.config.read_text())
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise CliError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise CliError(f"config {args.config} must hold a JSON object")
        opts.update({k.replace("-", "_"): v for k, v in cfg.items()})
    for k, v in vars(args).items():
        if v is not None and k not in ("command", "config"):
            opts[k] = v
    return opts


@contextlib.contextmanager
def thread_limit(n):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits
    import numba
    old = numba.get_num_threads()
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    try:
        with threadpool_limits(limits=n):
            yield
    finally:
        numba.set_num_threads(old)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load_cloud(path):
    from .shapes import PointCloudFormatError, load_pointcloud
    if not Path(path).is_file():
        raise CliError(f"cannot read {path}: no such file")
    try:
        return load_pointcloud(path)
    except (PointCloudFormatError, ValueError) as exc:
        raise CliError(f"{path}: {exc}") from None
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from None


def _load_dir(path, what):
    from .shapes import PointCloudFormatError, load_directory, normalize
    if path is None:
        raise CliError(f"--{what} directory is required")
    try:
        clouds = load_directory(path)
    except FileNotFoundError:
        raise CliError(f"cannot read {path}: not a directory") from None
    except (PointCloudFormatError, ValueError) as exc:
        raise CliError(f"{path}: {exc}") from None
    if not clouds:
        raise CliError(f"{path}: no .xyz or .ply point clouds found")
    out = []
    for pc in clouds:
        try:
            out.append(normalize(pc))
        except ValueError as exc:
            raise CliError(f"{path}/{pc.name}: {exc}") from None
    return out


def _load_model(path):
    from .embedder import Model
    try:
        return Model.load(path)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from None
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(f"{path}: not a valid checkpoint ({exc})") from None


def _write_text(path, text):
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror}") from None


def few_shot_subset(clouds, k, seed):
    """Pick ``k`` shapes per category; a category is a distinct label set."""
    from .embedder import substream
    groups = {}
    for pc in clouds:
        groups.setdefault(tuple(np.unique(pc.labels)), []).append(pc)
    rng = substream(seed, "labeled-subset")
    chosen = []
    for key in sorted(groups):
        members = groups[key]
        pick = rng.permutation(len(members))[:k]
        chosen.extend(members[i] for i in sorted(pick))
    return chosen


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_decompose(opts, out=None):
    from .embedder import EmbedderParams
    from .fitting import UnfittableShapeError
    from .meanshift import DegenerateEmbeddingError
    from .pipeline import PipelineConfig, decompose
    from .primitives import PrimitiveParams
    from .shapes import export_primitives, normalize
    from .train import pipeline_for

    pc = _load_cloud(opts["input"])
    try:
        norm = normalize(pc)
    except ValueError as exc:
        raise CliError(f"{opts['input']}: {exc}", EXIT_UNFITTABLE) from None
    centroid = pc.points.mean(axis=0)
    scale = float(np.max(np.linalg.norm(pc.points - centroid, axis=1)))
    if opts.get("checkpoint") is not None:
        model = _load_model(opts["checkpoint"])
        emb = model.embedder
        cfg = pipeline_for(model, kind=opts["primitive"], surface_samples=opts["surface_samples"])
    else:
        print("warning: no --checkpoint given, using a randomly initialised embedder",
              file=sys.stderr)
        emb = EmbedderParams.init(seed=opts["seed"], dtype=np.float64)
        cfg = PipelineConfig(kind=opts["primitive"], surface_samples=opts["surface_samples"])
    try:
        res = decompose(norm.points, emb, cfg, seed=opts["seed"])
    except (UnfittableShapeError, DegenerateEmbeddingError) as exc:
        raise CliError(f"cannot decompose {opts['input']}: {exc}", EXIT_UNFITTABLE) from None
    prims = []
    for f in res.fits:
        p = f.params
        prims.append(PrimitiveParams(p.kind, p.center * scale + centroid, p.rotation,
                                     p.semi_axes * scale))
    print(f"{len(prims)} primitive(s) for {opts['input']}", file=out)
    for i, (p, f) in enumerate(zip(prims, res.fits)):
        c = " ".join(f"{v:.4f}" for v in p.center)
        a = " ".join(f"{v:.4f}" for v in p.semi_axes)
        print(f"  [{i}] {p.kind} center=({c}) semi_axes=({a}) weight={f.effective_weight:.1f}",
              file=out)
    print("losses " + json.dumps(asdict(res.breakdown), sort_keys=True), file=out)
    for key, fmt in (("out_obj", "obj"), ("out_json", "json")):
        if opts.get(key) is not None:
            try:
                export_primitives(prims, opts[key], format=fmt)
            except OSError as exc:
                raise CliError(f"cannot write {opts[key]}: {exc.strerror}") from None
    return EXIT_OK


def _train_config(opts):
    from .train import TrainConfig
    names = {f.name for f in fields(TrainConfig)}
    kw = {k: v for k, v in opts.get("train", {}).items() if k in names}
    extra = set(opts.get("train", {})) - names
    if extra:
        raise CliError(f"unknown training options in config: {sorted(extra)}")
    mapping = {"steps": "steps", "lr": "learning_rate", "optimizer": "optimizer",
               "batch_unlabeled": "batch_unlabeled", "warmup_fraction": "warmup_fraction",
               "primitive": "primitive_kind", "seed": "seed", "k": "labeled_k"}
    for src, dst in mapping.items():
        if opts.get(src) is not None:
            kw[dst] = opts[src]
    if opts.get("supervised_only"):
        kw["ssl"] = False
    if opts.get("no_supervised"):
        kw["supervised"] = False
    try:
        return TrainConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid training options: {exc}") from None


def cmd_train(opts, out=None):
    from .train import TrainingDivergedError, train

    cfg = _train_config(opts)
    unlabeled = _load_dir(opts["unlabeled"], "unlabeled") if cfg.ssl else []
    labeled = []
    if cfg.supervised:
        labeled = _load_dir(opts["labeled"], "labeled")
        missing = [pc.name for pc in labeled if not pc.has_labels]
        if missing:
            raise CliError(f"labeled shapes without labels: {missing[:3]}")
        labeled = few_shot_subset(labeled, cfg.labeled_k, cfg.seed)
    log_path = opts.get("log") or Path(str(opts["out"]) + ".log.jsonl")
    try:
        result = train(unlabeled, labeled, cfg)
    except TrainingDivergedError as exc:
        raise CliError(f"training diverged: {exc}", EXIT_DIVERGED) from None
    except ValueError as exc:
        raise CliError(str(exc)) from None
    _write_text(opts["out"], result.model.to_json() + "\n")
    _write_text(log_path, result.log_lines())
    last = [r for r in result.log if "total" in r]
    print(f"trained {cfg.steps} step(s) on {len(unlabeled)} unlabeled / {len(labeled)} labeled "
          f"shape(s); checkpoint {opts['out']}", file=out)
    if last:
        print("final " + json.dumps(last[-1], sort_keys=True), file=out)
    return EXIT_OK


def cmd_eval(opts, out=None):
    from .metrics import evaluate_segmentation

    model = _load_model(opts["checkpoint"])
    test = _load_dir(opts["test"], "test")
    unlabeled = [pc.name for pc in test if not pc.has_labels]
    if unlabeled:
        raise CliError(f"evaluation requires labels; unlabeled test shapes: {unlabeled[:3]}")
    try:
        report = evaluate_segmentation(model, test)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    _write_text(opts["report"], report.to_json() + "\n")
    print(f"miou={report.miou:.4f} nmi={report.nmi:.4f} shapes={report.shapes}", file=out)
    return EXIT_OK


def cmd_gradcheck(opts, out=None):
    from .gradcheck import gradcheck_suite

    try:
        report = gradcheck_suite(opts["seed"], broken=opts.get("inject_broken_op") or ())
    except KeyError as exc:
        raise CliError(str(exc.args[0])) from None
    for c in report.cases:
        err = "-" if c.max_rel_error != c.max_rel_error else f"{c.max_rel_error:.2e}"
        print(f"{c.name:28s} {c.status:28s} {err}", file=out)
    if opts.get("report") is not None:
        _write_text(opts["report"], report.to_json() + "\n")
    if not report.passed:
        print("gradient check FAILED: " + ", ".join(report.failures), file=out)
        return EXIT_GRADCHECK
    print("gradient check passed", file=out)
    return EXIT_OK


def _spec_from_file(path, points, seed):
    from .primitives import PrimitiveParams
    from .shapes import SyntheticSpec
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path} is not valid JSON: {exc}") from None
    parts = doc["parts"] if isinstance(doc, dict) else doc
    try:
        params = [PrimitiveParams.from_dict(p) for p in parts]
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"{path}: invalid part description ({exc})") from None
    return SyntheticSpec(params, points, seed, name=Path(path).stem)


def cmd_synth(opts, out=None):
    from .embedder import substream
    from .shapes import (ensure_dir, generate_synthetic, normalize, random_separated_spec,
                         save_pointcloud)

    root = ensure_dir(opts["out_dir"])
    fmt = opts["format"]
    if opts.get("benchmark"):
        from .fewshot import few_shot_benchmark
        bench = few_shot_benchmark(opts["seed"], unlabeled=opts.get("unlabeled") or 200,
                                   k=opts.get("k") or 5)
        for split in ("unlabeled", "labeled", "test"):
            d = ensure_dir(root / split)
            for pc in getattr(bench, split):
                save_pointcloud(pc, d / f"{pc.name}.{fmt}")
        print(f"wrote benchmark to {root}: {len(bench.unlabeled)} unlabeled, "
              f"{len(bench.labeled)} labeled, {len(bench.test)} test", file=out)
        return EXIT_OK
    rng = substream(opts["seed"], "synth")
    written = 0
    for i in range(opts["count"]):
        shape_seed = int(rng.integers(2**31))
        if opts.get("spec") is not None:
            spec = _spec_from_file(opts["spec"], opts["points"], shape_seed)
        else:
            spec = random_separated_spec(opts["parts"], shape_seed, opts["points"])
        try:
            pc = normalize(generate_synthetic(spec))
        except ValueError as exc:
            raise CliError(f"invalid synthetic spec: {exc}") from None
        save_pointcloud(pc, root / f"shape_{i:04d}.{fmt}")
        written += 1
    print(f"wrote {written} shape(s) to {root}", file=out)
    return EXIT_OK


COMMANDS = {"decompose": cmd_decompose, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "synth": cmd_synth}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = resolve_options(args)
        with thread_limit(opts.get("threads")):
            return COMMANDS[args.command](opts, sys.stdout)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
