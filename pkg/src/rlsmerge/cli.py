"""Command-line entry point: ``rlsmerge <command> [flags]``.

Exit codes: 0 success, 2 bad arguments or parameters, 3 I/O or bundle
failures, 4 numerical failures. Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .adapters import LowRankAdapter, TaskVector, assemble_final_weights, materialize_task_vector
from .covariance import compress_covariance, reconstruct_covariance
from .cpm import DEFAULT_TEMPERATURE, ProjectorRegistry, merged_projection, routing_weights, similarity
from .errors import NumericalError, ShapeError, StoreError, ZeroNormError
from .lpm import MergedState, merge_sequence
from .metrics import AccuracyMatrix, compute_metrics
from .simulator import (
    DEFAULT_GAMMA,
    STRATEGIES,
    StreamConfig,
    fit_task_adapter,
    fit_task_projector,
    generate_stream,
    run_continual,
)
from .store import atomic_write, load_bundle, read_manifest, save_bundle

log = logging.getLogger("rlsmerge")

WORKERS_ENV = "RLSMERGE_WORKERS"
ASSEMBLE_LAMBDA = 3.0
SIM_LAMBDA = 1.0
DEFAULT_RANK = 16

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail(EXIT_USAGE, "usage", message)


def _fail(code: int, kind: str, message: str):
    sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": str(message)}) + "\n")
    raise SystemExit(code)


class _JsonLines(logging.Formatter):
    def format(self, record):
        doc = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        doc.update(getattr(record, "fields", {}))
        return json.dumps(doc, sort_keys=True)


def _setup_logging(verbosity: int):
    root = logging.getLogger("rlsmerge")
    root.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLines())
    root.addHandler(handler)
    root.setLevel(logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG)
    root.propagate = False


def _info(msg, **fields):
    log.info(msg, extra={"fields": fields})


# argument types ------------------------------------------------------------


def _unit_interval_open_closed(text):
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {v}")
    return v


def _positive(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {v}")
    return v


def _finite(text):
    v = float(text)
    if not np.isfinite(v):
        raise argparse.ArgumentTypeError(f"must be finite, got {v}")
    return v


def _float_list(text):
    return [_finite(x) for x in text.split(",") if x]


def _gamma_list(text):
    out = []
    for x in text.split(","):
        if x == "full":
            out.append("full")
        elif x:
            out.append(_unit_interval_open_closed(x))
    return out


def _int_list(text):
    return [int(x) for x in text.split(",") if x]


_STREAM_FLAGS = {
    # dest: (flag, type, help)
    "task_count": ("--tasks", int, "number of tasks n (>= 1)"),
    "dim": ("--dim", int, "layer input width d (>= 1)"),
    "out_dim": ("--out-dim", int, "layer output width (default: same as --dim)"),
    "samples": ("--samples", int, "training samples per task (>= task subspace width)"),
    "eval_samples": ("--eval-samples", int, "held-out samples per task"),
    "rank": ("--rank", int, "adapter rank r (1 <= r <= min(d, d_out))"),
    "layer_count": ("--layers", int, "number of adapted layers L"),
    "overlap": ("--overlap", float, "shared fraction of task feature subspaces, in [0, 1]"),
    "proto_dim": ("--proto-dim", int, "visual feature width d_v (>= n)"),
    "proto_separation": ("--separation", float, "prototype cluster separation in cluster sigmas (>= 0)"),
    "cluster_sigma": ("--cluster-sigma", float, "per-dimension cluster std (> 0)"),
    "noise": ("--noise", float, "relative target noise (>= 0)"),
    "spectrum_jitter": ("--spectrum-jitter", float, "per-task spread of feature strengths, in [0, 1)"),
    "base_scale": ("--base-scale", float, "scale of the frozen base weights (>= 0)"),
    "seed": ("--seed", int, "64-bit seed"),
}


def _add_stream_flags(p):
    defaults = StreamConfig()
    g = p.add_argument_group("stream")
    for dest, (flag, typ, text) in _STREAM_FLAGS.items():
        default = None if dest == "out_dim" else getattr(defaults, dest)
        g.add_argument(flag, dest=dest, type=typ, default=default, help=f"{text} (default: {default})")
    g.add_argument("--config", type=Path, help="JSON file of flag values; explicit flags override it")


def _stream_config(args) -> StreamConfig:
    return StreamConfig(**{f.name: getattr(args, f.name) for f in fields(StreamConfig) if hasattr(args, f.name)})


def _add_merge_params(p, lam_default):
    p.add_argument("--lambda", dest="lam", type=_finite, default=lam_default,
                   help=f"scaling factor applied at final assembly (finite; default: {lam_default})")
    p.add_argument("--gamma", type=_unit_interval_open_closed, default=DEFAULT_GAMMA,
                   help=f"energy threshold for compressed covariance, in (0, 1] (default: {DEFAULT_GAMMA})")
    p.add_argument("--eta", type=_positive, default=DEFAULT_TEMPERATURE,
                   help=f"routing temperature (> 0; default: {DEFAULT_TEMPERATURE})")


# outputs -------------------------------------------------------------------


def _write_json(path: Path | None, doc):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        atomic_write(path, text.encode())


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write(path, buf.getvalue().encode())


def accuracy_csv_rows(acc: AccuracyMatrix):
    return [(i, j, repr(v)) for (i, j), v in sorted(acc.entries.items())]


def _load(path: Path, *kinds):
    kind = read_manifest(path)["kind"]
    if kinds and kind not in kinds:
        raise UsageError(f"{path}: expected a {' or '.join(kinds)} bundle, got {kind}")
    return load_bundle(path)


# commands ------------------------------------------------------------------


def cmd_simulate(args):
    cfg = _stream_config(args)
    stream = generate_stream(cfg)
    report = run_continual(stream, args.strategy, lam=args.lam, gamma=args.gamma, eta=args.eta)
    _info("simulated", strategy=report.strategy, wall_time=report.wall_time, **report.metrics.to_json())
    _write_json(args.out, report.to_json(include_timing=args.timing))
    if args.csv:
        _write_csv(args.csv, ["after_task", "task", "accuracy"], accuracy_csv_rows(report.accuracy))
    if args.figure:
        from .plots import plot_accuracy_matrix

        plot_accuracy_matrix(report.accuracy, args.figure, title=report.strategy)
    if args.export_dir:
        export_stream(stream, args.export_dir, args.eta)
    return 0


def export_stream(stream, out_dir: Path, eta: float = DEFAULT_TEMPERATURE):
    """Write base weights, per-task adapters and features, and the projector registry."""
    from .cpm import compute_prototype

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = stream.config
    meta = {"seed": cfg.seed}
    save_bundle(dict(stream.base), out_dir / "base.bundle", metadata=meta)
    registry = ProjectorRegistry(temperature=eta)
    for task in stream:
        adapters = {l: fit_task_adapter(task, l, cfg.rank)[0] for l in stream.layers}
        tmeta = {**meta, "task": task.index, "rank": cfg.rank}
        save_bundle(adapters, out_dir / f"task{task.index}.adapter.bundle", metadata=tmeta)
        save_bundle(dict(task.features), out_dir / f"task{task.index}.features.bundle", metadata=tmeta)
        registry = registry.append(compute_prototype(task.index, task.global_features), fit_task_projector(task))
    save_bundle(registry, out_dir / "registry.bundle", metadata={**meta, "eta": eta})


def cmd_fit(args):
    cfg = _stream_config(args)
    if not 1 <= args.task <= cfg.task_count:
        raise UsageError(f"--task must lie in [1, {cfg.task_count}]")
    stream = generate_stream(cfg)
    task = stream[args.task - 1]
    adapters, residuals = {}, {}
    for l in stream.layers:
        adapters[l], residuals[l.name] = fit_task_adapter(task, l, cfg.rank)
    meta = {"seed": cfg.seed, "task": args.task, "rank": cfg.rank, "residuals": residuals}
    save_bundle(adapters, args.out, metadata=meta)
    if args.features_out:
        save_bundle(dict(task.features), args.features_out, metadata=meta)
    _write_json(None, {"task": args.task, "residuals": residuals})
    return 0


def _as_task_vectors(obj):
    if isinstance(obj, (TaskVector, LowRankAdapter)):
        obj = {obj.layer: obj}
    return {l: materialize_task_vector(v) if isinstance(v, LowRankAdapter) else v for l, v in obj.items()}


def cmd_merge(args):
    if len(args.inputs) != len(args.features):
        raise UsageError("--in and --features need the same number of bundles")
    stream = []
    for tv_path, feat_path in zip(args.inputs, args.features):
        taus = _as_task_vectors(_load(tv_path, "adapter", "task_vector"))
        feats = _load(feat_path, "features")
        if not isinstance(feats, dict):
            feats = {feats.layer: feats}
        stream.append((feats, taus))
    state = merge_sequence(stream, gamma=args.gamma if args.compressed else None)
    meta = {"tasks_merged": state.tasks_merged, "gamma": args.gamma if args.compressed else None}
    save_bundle(state, args.out, metadata=meta)
    _info("merged", **meta)
    return 0


def cmd_compress_stats(args):
    obj = _load(args.inputs, "covariance", "merged_state")
    covs = {l: s.cov for l, s in obj.layers.items()} if isinstance(obj, MergedState) else obj
    if not isinstance(covs, dict):
        covs = {covs.layer: covs}
    out, stats = {}, []
    for layer, cov in sorted(covs.items()):
        if cov.compressed:
            raise UsageError(f"{layer.name}: covariance is already compressed")
        comp = compress_covariance(cov, args.gamma)
        H = cov.matrix
        denom = float(np.linalg.norm(H))
        err = float(np.linalg.norm(H - reconstruct_covariance(comp))) / denom if denom else 0.0
        out[layer] = comp
        stats.append({"layer": layer.name, "dim": cov.dim, "rank": comp.spectral.rank,
                      "storage_ratio": comp.storage_ratio(), "reconstruction_error": err})
    if args.out:
        save_bundle(out, args.out, metadata={"gamma": args.gamma})
    _write_json(None, {"gamma": args.gamma, "layers": stats})
    return 0


def route_queries(registry: ProjectorRegistry, queries: np.ndarray, eta: float | None = None):
    eta = registry.temperature if eta is None else eta
    sims, weights = [], []
    for q in np.atleast_2d(queries):
        try:
            s = [similarity(q, p) for p in registry.prototypes]
            w = routing_weights(s, eta)
        except ZeroNormError:
            s = [None] * len(registry)
            w = np.full(len(registry), 1.0 / len(registry))
        sims.append(s)
        weights.append(w.tolist())
    return {
        "similarities": sims,
        "weights": weights,
        "argmax": [int(np.argmax(w)) + 1 for w in weights],
        "eta": eta,
    }


def cmd_route(args):
    registry = _load(args.registry, "registry")
    queries = np.load(args.query)
    result = route_queries(registry, queries, args.eta)
    _write_json(args.out, result)
    if args.spatial is not None:
        if args.projected_out is None:
            raise UsageError("--spatial needs --projected-out")
        if np.atleast_2d(queries).shape[0] != 1:
            raise UsageError("--spatial takes exactly one query")
        reg = ProjectorRegistry(registry.entries, args.eta or registry.temperature)
        tokens = merged_projection(np.load(args.spatial), reg, np.atleast_2d(queries)[0])
        buf = io.BytesIO()
        np.save(buf, tokens)
        atomic_write(args.projected_out, buf.getvalue())
    return 0


def cmd_assemble(args):
    base = _load(args.base, "base_weights")
    merged = _load(args.merged, "merged_state", "task_vector")
    taus = merged.merged_vectors() if isinstance(merged, MergedState) else _as_task_vectors(merged)
    if set(base) != set(taus):
        raise UsageError("base weights and merged bundle cover different layers")
    final = {l: assemble_final_weights(base[l], taus[l], args.lam) for l in sorted(base)}
    save_bundle(final, args.out, metadata={"lambda": args.lam})
    return 0


def load_accuracy(doc) -> AccuracyMatrix:
    """Accuracy matrix from an evaluation report or a standalone accuracy document."""
    if "accuracy" in doc:
        doc = doc["accuracy"]
    return AccuracyMatrix.from_json(doc)


def cmd_eval(args):
    try:
        doc = json.loads(Path(args.report).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.report}: not valid JSON ({exc})") from exc
    acc = load_accuracy(doc)
    metrics = compute_metrics(acc)
    _write_json(args.out, {"n": acc.n, "metrics": metrics.to_json()})
    if args.csv:
        _write_csv(args.csv, ["after_task", "task", "accuracy"], accuracy_csv_rows(acc))
    if args.figure:
        from .plots import plot_accuracy_matrix

        plot_accuracy_matrix(acc, args.figure)
    return 0


SWEEP_HEADER = ["lambda", "gamma", "seed", "strategy", "FAA", "CAA", "FFM", "drift_total",
                "storage_ratio", "reconstruction_error", "routing_accuracy"]


def sweep_cell(cfg_doc: dict, lam: float, gamma, eta: float) -> dict:
    """One (lambda, gamma, seed) cell; ``gamma == "full"`` runs the uncompressed arm."""
    stream = generate_stream(StreamConfig.from_json(cfg_doc))
    if gamma == "full":
        report = run_continual(stream, "many", lam=lam, eta=eta)
    else:
        report = run_continual(stream, "many_star", lam=lam, gamma=gamma, eta=eta)
    storage = report.storage or {}
    return {
        "lambda": lam,
        "gamma": gamma,
        "seed": cfg_doc["seed"],
        "strategy": report.strategy,
        "FAA": report.metrics.faa,
        "CAA": report.metrics.caa,
        "FFM": report.metrics.ffm,
        "drift_total": report.drift.total,
        "storage_ratio": storage.get("storage_ratio", 1.0),
        "reconstruction_error": storage.get("reconstruction_error", 0.0),
        "routing_accuracy": report.routing_accuracy,
    }


def run_sweep(cfg: StreamConfig, lambdas, gammas, seeds, eta=DEFAULT_TEMPERATURE, workers=1) -> list[dict]:
    cells = []
    for seed in seeds:
        doc = {**cfg.to_json(), "seed": seed}
        for lam in lambdas:
            for gamma in gammas:
                cells.append((doc, lam, gamma, eta))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(sweep_cell, *zip(*cells)))
    return [sweep_cell(*c) for c in cells]


def cmd_sweep(args):
    cfg = _stream_config(args)
    workers = args.workers or int(os.environ.get(WORKERS_ENV, "1"))
    rows = run_sweep(cfg, args.lambdas, args.gammas, args.seeds, args.eta, workers)
    _write_csv(
        args.out,
        SWEEP_HEADER,
        [["" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in SWEEP_HEADER] for r in rows],
    )
    if args.figure:
        from .plots import plot_sweep

        plot_sweep(rows, args.figure)
    return 0


# parser --------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="rlsmerge", description="Training-free merging of low-rank adapters.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0, help="JSON logs on stderr (-vv for debug)")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS, help="JSON logs on stderr (-vv for debug)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {}

    p = subs["simulate"] = sub.add_parser("simulate", parents=[common], help="run one strategy on a synthetic stream")
    _add_stream_flags(p)
    p.add_argument("--strategy", choices=STRATEGIES, default="many", help="merging strategy (default: many)")
    _add_merge_params(p, SIM_LAMBDA)
    p.add_argument("--out", type=Path, required=True, help="evaluation report (JSON)")
    p.add_argument("--csv", type=Path, help="also write the accuracy matrix as CSV")
    p.add_argument("--figure", type=Path, help="also render the accuracy matrix (PNG)")
    p.add_argument("--export-dir", type=Path, help="write base/adapter/features/registry bundles here")
    p.add_argument("--timing", action="store_true", help="include wall time in the report (breaks byte-identity)")
    p.set_defaults(func=cmd_simulate)

    p = subs["fit"] = sub.add_parser("fit", parents=[common], help="fit one task's adapters on a synthetic stream")
    _add_stream_flags(p)
    p.set_defaults(rank=DEFAULT_RANK)
    p.add_argument("--task", type=int, required=True, help="task index, 1..n")
    p.add_argument("--out", type=Path, required=True, help="adapter bundle")
    p.add_argument("--features-out", type=Path, help="also write the task's feature bundle")
    p.set_defaults(func=cmd_fit)

    p = subs["merge"] = sub.add_parser("merge", parents=[common], help="recursively merge task vectors in task order")
    p.add_argument("--in", dest="inputs", type=Path, nargs="+", required=True, help="adapter or task-vector bundles in task order")
    p.add_argument("--features", type=Path, nargs="+", required=True, help="feature bundles, one per --in")
    p.add_argument("--out", type=Path, required=True, help="merged-state bundle")
    p.add_argument("--compressed", action="store_true", help="keep the covariance truncated at --gamma")
    p.add_argument("--gamma", type=_unit_interval_open_closed, default=DEFAULT_GAMMA,
                   help=f"energy threshold with --compressed, in (0, 1] (default: {DEFAULT_GAMMA})")
    p.set_defaults(func=cmd_merge)

    p = subs["compress-stats"] = sub.add_parser("compress-stats", parents=[common], help="compress covariance statistics")
    p.add_argument("--in", dest="inputs", type=Path, required=True, help="covariance or merged-state bundle")
    p.add_argument("--gamma", type=_unit_interval_open_closed, default=DEFAULT_GAMMA,
                   help=f"energy threshold, in (0, 1] (default: {DEFAULT_GAMMA})")
    p.add_argument("--out", type=Path, help="compressed covariance bundle")
    p.set_defaults(func=cmd_compress_stats)

    p = subs["route"] = sub.add_parser("route", parents=[common], help="route queries through a projector registry")
    p.add_argument("--registry", type=Path, required=True, help="registry bundle")
    p.add_argument("--query", type=Path, required=True, help=".npy of one (d_v,) or many (m, d_v) global features")
    p.add_argument("--spatial", type=Path, help=".npy (tokens, d_v) spatial features for a single query")
    p.add_argument("--projected-out", type=Path, help=".npy output of the blended projection")
    p.add_argument("--eta", type=_positive, default=None, help="temperature override (> 0; default: registry value)")
    p.add_argument("--out", type=Path, help="routing result JSON (default: stdout)")
    p.set_defaults(func=cmd_route)

    p = subs["assemble"] = sub.add_parser("assemble", parents=[common], help="W_final = W_base + lambda * merged task vector")
    p.add_argument("--base", type=Path, required=True, help="base-weights bundle")
    p.add_argument("--merged", type=Path, required=True, help="merged-state or task-vector bundle")
    p.add_argument("--lambda", dest="lam", type=_finite, default=ASSEMBLE_LAMBDA,
                   help=f"scaling factor (finite; default: {ASSEMBLE_LAMBDA})")
    p.add_argument("--out", type=Path, required=True, help="final base-weights bundle")
    p.set_defaults(func=cmd_assemble)

    p = subs["eval"] = sub.add_parser("eval", parents=[common], help="FAA / CAA / FFM of a report or accuracy matrix")
    p.add_argument("--report", type=Path, required=True, help="evaluation report or accuracy-matrix JSON")
    p.add_argument("--out", type=Path, help="metrics JSON (default: stdout)")
    p.add_argument("--csv", type=Path, help="accuracy matrix as CSV")
    p.add_argument("--figure", type=Path, help="accuracy-matrix heatmap (PNG)")
    p.set_defaults(func=cmd_eval)

    p = subs["sweep"] = sub.add_parser("sweep", parents=[common], help="lambda x gamma x seed grid to CSV")
    _add_stream_flags(p)
    p.add_argument("--lambdas", type=_float_list, default=[1.0, 2.0, 3.0],
                   help="comma-separated scaling factors (default: 1,2,3)")
    p.add_argument("--gammas", type=_gamma_list, default=["full", 0.9, 0.99, 0.999, 1.0],
                   help="comma-separated thresholds in (0, 1]; 'full' = uncompressed (default: full,0.9,0.99,0.999,1.0)")
    p.add_argument("--seeds", type=_int_list, default=[0], help="comma-separated seeds (default: 0)")
    p.add_argument("--eta", type=_positive, default=DEFAULT_TEMPERATURE,
                   help=f"routing temperature (> 0; default: {DEFAULT_TEMPERATURE})")
    p.add_argument("--workers", type=int, default=None,
                   help=f"parallel worker processes (default: ${WORKERS_ENV} or 1)")
    p.add_argument("--out", type=Path, required=True, help="sweep CSV")
    p.add_argument("--figure", type=Path, help="FAA/FFM against lambda and gamma (PNG)")
    p.set_defaults(func=cmd_sweep)
    return parser, subs


def _apply_config(args, argv, parser, subs):
    if getattr(args, "config", None) is None:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.config}: not valid JSON ({exc})") from exc
    sp = subs[args.command]
    dests = {a.dest for a in sp._actions}
    unknown = set(cfg) - dests
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    sp.set_defaults(**cfg)
    return parser.parse_args(argv)


_INPUTS = ("inputs", "features", "registry", "query", "spatial", "base", "merged", "report")
_OUTPUTS = ("out", "csv", "figure", "features_out", "projected_out")


def _validate_paths(args):
    """Fail before any work if an input is missing or an output directory does not exist."""
    for name in _INPUTS:
        value = getattr(args, name, None)
        for path in value if isinstance(value, list) else [value]:
            if path is not None and not Path(path).is_file():
                raise FileNotFoundError(f"input not found: {path}")
    for name in _OUTPUTS:
        path = getattr(args, name, None)
        if path is not None and not Path(path).resolve().parent.is_dir():
            raise FileNotFoundError(f"output directory does not exist: {Path(path).parent}")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
        _setup_logging(args.verbose)
        args = _apply_config(args, argv, parser, subs)
        _validate_paths(args)
        started = time.perf_counter()
        code = args.func(args)
        _info("done", command=args.command, seconds=round(time.perf_counter() - started, 6))
        return code
    except SystemExit:
        raise
    except (UsageError, ShapeError, KeyError) as exc:
        _fail(EXIT_USAGE, "invalid-parameter", exc)
    except (NumericalError, np.linalg.LinAlgError) as exc:
        _fail(EXIT_NUMERIC, "numerical", exc)
    except (StoreError, OSError) as exc:
        _fail(EXIT_IO, "io", exc)
    except ValueError as exc:
        _fail(EXIT_USAGE, "invalid-parameter", exc)


if __name__ == "__main__":
    sys.exit(main())
