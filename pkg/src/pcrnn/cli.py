"""Command-line interface.

Exit codes: 0 success, 1 bad config / input schema / bounds, 2 numerical
divergence, 3 dimension mismatch between weights and config, 4 gradient
check outside tolerance.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import AnalysisConfig, gmm_landscape, pooled_transitions, row_independence_score
from .checks import FAULTS, run_all
from .model import DivergenceError, ModelDims, ModelWeights
from .prior import GmmPrior
from .simulation import DimensionMismatch, SimConfig, SimulationDiverged, TrajectoryRecord, run_batch
from .training import TrainConfig, train

log = logging.getLogger("pcrnn")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_DIMS, EXIT_TOLERANCE = 0, 1, 2, 3, 4
MANIFEST_VERSION = 1


class ConfigError(Exception):
    pass


def load_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return doc


def build(factory, doc, what):
    try:
        return factory(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what} config: {exc}") from exc


def out_path(prefix: str, name: str) -> Path:
    """``runs/a`` + ``loss.csv`` -> ``runs/a.loss.csv``; ``runs/`` -> ``runs/loss.csv``."""
    path = Path(prefix + name) if prefix.endswith(("/", "\\")) else Path(f"{prefix}.{name}")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(prefix, command, config, seed, outputs, started, weights=None) -> Path:
    path = out_path(prefix, "manifest.json")
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "weights": None if weights is None else {"path": str(weights), "sha256": file_sha256(weights)},
        "outputs": [{"path": str(p), "sha256": file_sha256(p)} for p in outputs],
        "duration_s": round(time.time() - started, 3),
        "format_version": MANIFEST_VERSION,
        "package_version": __version__,
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def cmd_train(args) -> int:
    started = time.time()
    doc = load_json(args.config) if args.config else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = build(TrainConfig.from_dict, doc, "training")
    try:
        w, losses = train(cfg)
    except DivergenceError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    weights_path = out_path(args.out, "weights.json")
    w.save(weights_path)
    loss_path = out_path(args.out, "loss.csv")
    with open(loss_path, "w", newline="\n") as fh:
        fh.write("iteration,loss\n")
        for i, loss in enumerate(losses, 1):
            fh.write(f"{i},{loss:.17g}\n")
    write_manifest(args.out, "train", cfg.to_dict(), cfg.seed, [weights_path, loss_path], started, weights_path)
    if len(losses):
        log.info("final loss %.6g after %d iterations (first %.6g)", losses[-1], len(losses), losses[0])
    return EXIT_OK


def _write_records(args, records, prefix_runs):
    paths = []
    for rec in records:
        stem = f"run{rec.meta['run_index']:03d}." if prefix_runs else ""
        csv_path = out_path(args.out, stem + "trajectory.csv")
        rec.write_csv(csv_path)
        meta_path = out_path(args.out, stem + "meta.json")
        meta = {**rec.meta, "steps_recorded": len(rec), "columns": rec.csv_header().split(",")}
        meta_path.write_text(json.dumps(meta, indent=2) + "\n")
        paths += [csv_path, meta_path]
        if rec.h_post is not None:
            states_path = out_path(args.out, stem + "states.csv")
            rec.write_states_csv(states_path)
            paths.append(states_path)
    return paths


def cmd_simulate(args) -> int:
    started = time.time()
    doc = load_json(args.config) if args.config else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.states:
        doc["record_states"] = True
    cfg = build(SimConfig.from_dict, doc, "simulation")
    try:
        w = ModelWeights.load(args.weights)
    except OSError as exc:
        raise ConfigError(f"cannot read weights {args.weights}: {exc.strerror}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid weights file {args.weights}: {exc}") from exc
    if args.runs < 1:
        raise ConfigError("--runs must be >= 1")
    runs = list(range(args.runs))
    status = EXIT_OK
    try:
        records = run_batch(w, cfg, runs=runs)
    except DimensionMismatch as exc:
        log.error("%s", exc)
        return EXIT_DIMS
    except SimulationDiverged as exc:
        log.error("simulation diverged at step %s; partial trajectory kept", exc.step)
        records = exc.record if isinstance(exc.record, list) else [exc.record]
        for rec in records:
            rec.meta["diverged_at_step"] = exc.step
        status = EXIT_DIVERGED
    outputs = _write_records(args, records, prefix_runs=args.runs > 1)
    write_manifest(args.out, "simulate", cfg.to_dict(), cfg.seed, outputs, started, args.weights)
    return status


def cmd_analyze(args) -> int:
    started = time.time()
    doc = load_json(args.config) if args.config else {}
    cfg = build(AnalysisConfig.from_dict, doc, "analysis")
    records = []
    for path in args.trajectories:
        try:
            records.append(TrajectoryRecord.read_csv(path))
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    p = records[0].p
    if any(r.p != p for r in records):
        raise ConfigError("trajectories disagree on the number of causes")
    labelings, pairs, tm = pooled_transitions([r.c for r in records], cfg, p, times=[r.t for r in records])

    labels_path = out_path(args.out, "labels.csv")
    with open(labels_path, "w", newline="\n") as fh:
        fh.write("run,t,label\n")
        for i, (rec, lab) in enumerate(zip(records, labelings)):
            for t, label in zip(rec.t, lab.labels):
                fh.write(f"{i},{t},{label}\n")
    trans_path = out_path(args.out, "transitions.csv")
    with open(trans_path, "w", newline="\n") as fh:
        fh.write("from,to,step\n")
        for a, b, step in pairs:
            fh.write(f"{a},{b},{step}\n")
    score = None if tm.unpopulated_rows else row_independence_score(tm)
    matrix_path = out_path(args.out, "matrix.json")
    tm.write_json(
        matrix_path,
        theta=cfg.theta,
        dwell=cfg.dwell,
        count_self=cfg.count_self,
        independence_score=score,
        sources=[str(p_) for p_ in args.trajectories],
    )
    if not args.quiet:
        print(f"{tm.n_transitions} transitions; independence score: {'n/a' if score is None else f'{score:.4f}'}")
        if tm.unpopulated_rows:
            print(f"rows without outgoing transitions: {tm.unpopulated_rows}")
    write_manifest(args.out, "analyze", vars(cfg), None, [labels_path, trans_path, matrix_path], started)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    try:
        dims = ModelDims(n=args.n, p=args.p, d=args.d)
        results = run_all(seed, dims, args.steps, fault=args.inject_fault)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    failed = [r for r in results if not r.ok]
    if not args.quiet:
        for r in results:
            print(f"{r.name:<20s} max rel err {r.error:.3e}  tol {r.tolerance:.0e}  {'ok' if r.ok else 'FAIL'}")
    for r in failed:
        log.error("%s outside tolerance: %.3e >= %.0e", r.name, r.error, r.tolerance)
    return EXIT_TOLERANCE if failed else EXIT_OK


def cmd_landscape(args) -> int:
    started = time.time()
    doc = {"p": 2, "sigma_c": 0.4, "bounds": [-0.5, 1.5, -0.5, 1.5], "resolution": 201, "dims": [0, 1]}
    if args.config:
        extra = load_json(args.config)
        unknown = set(extra) - set(doc)
        if unknown:
            raise ConfigError(f"unknown landscape config keys: {sorted(unknown)}")
        doc.update(extra)
    for key in ("sigma_c", "bounds", "resolution", "p"):
        if getattr(args, key) is not None:
            doc[key] = getattr(args, key)
    try:
        land = gmm_landscape(
            GmmPrior.one_hot(int(doc["p"])),
            float(doc["sigma_c"]),
            bounds=tuple(doc["bounds"]),
            resolution=int(doc["resolution"]),
            dims=tuple(doc["dims"]),
        )
    except (TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"invalid landscape request: {exc}") from exc
    path = out_path(args.out, "landscape.csv")
    land.write_csv(path)
    if not args.quiet:
        modes = land.local_maxima()
        print(f"{len(modes)} local maxima: " + ", ".join(f"({a:.3f}, {b:.3f})" for a, b in modes))
    write_manifest(args.out, "landscape", doc, None, [path], started)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="64-bit seed, overrides the config")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--out", default="out/", help="output prefix (default: out/)")
    common.add_argument("--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="pcrnn", description="Predictive-coding RNN with hidden causes")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train the limit-cycle attractors")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", parents=[common], help="closed-loop generation")
    p.add_argument("--weights", required=True)
    p.add_argument("--runs", type=int, default=1, help="independent runs with derived seeds")
    p.add_argument("--states", action="store_true", help="also write hidden states")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", parents=[common], help="attractor transitions of trajectories")
    p.add_argument("trajectories", nargs="+")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of all derivatives")
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--inject-fault", choices=FAULTS, default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("landscape", parents=[common], help="mixture prior density on a grid")
    p.add_argument("--sigma-c", dest="sigma_c", type=float, default=None)
    p.add_argument("--bounds", type=float, nargs=4, default=None, metavar=("C0_LO", "C0_HI", "C1_LO", "C1_HI"))
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--p", type=int, default=None)
    p.set_defaults(func=cmd_landscape)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        log.error("seed must fit in an unsigned 64-bit integer")
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
