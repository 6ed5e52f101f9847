"""``celldiff`` command line: train, sample, eval, analyze, ablate."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, replace

from .bench import load_benchmark, synth_benchmark
from .conditioning import ConditionVector
from .denoiser import _atomic_write, load_checkpoint
from .harness import (ABLATION_FIELDS, REPORT_VERSION, ConfigError, ablate, analyze, load_config,
                      read_cells, run_eval, train_run, write_cells, latency_constraint)
from .sampling import SampleRequest, denoise
from .spaces import SYNTH_DEFAULTS, get_space
from .training import load_manifest

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
RUN_ROOT_ENV = "DINAS_RUN_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _out_dir(args, default_name: str) -> str:
    if args.out:
        return args.out
    return os.path.join(os.environ.get(RUN_ROOT_ENV, "runs"), default_name)


def _write_json(path: str, obj) -> None:
    _atomic_write(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _parse_conditions(pairs: list[str]) -> dict[str, int]:
    out = {}
    for item in pairs:
        name, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--condition expects NAME=CLASS, got {item!r}")
        try:
            out[name] = int(value)
        except ValueError:
            raise UsageError(f"--condition {name}: class must be an integer, got {value!r}") from None
    return out


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    run_dir = _out_dir(args, cfg.name)
    _, manifest, _, _, paths = train_run(cfg, run_dir)
    print(json.dumps({"run_dir": run_dir, "final_loss": manifest.final_loss, **paths}, indent=2))
    return EXIT_OK


def _resolve_run(path: str) -> tuple[str, str]:
    if os.path.isdir(path):
        return os.path.join(path, "checkpoint.json"), os.path.join(path, "manifest.json")
    return path, os.path.join(os.path.dirname(path) or ".", "manifest.json")


def cmd_sample(args) -> int:
    ckpt_path, manifest_path = _resolve_run(args.run)
    manifest = load_manifest(manifest_path)
    model = load_checkpoint(ckpt_path, manifest.schema)
    named = _parse_conditions(args.condition)
    try:
        conds = manifest.schema.parse(named) if named else ConditionVector.null(manifest.schema.k)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    request = SampleRequest(args.count, conds, args.gamma, args.seed, args.filter_valid, args.combine_space)
    result = denoise(model, request, manifest)
    out = _out_dir(args, "samples")
    os.makedirs(out, exist_ok=True)
    write_cells(os.path.join(out, "cells.jsonl"), result.cells)
    report = {
        "schema_version": REPORT_VERSION,
        "count": len(result.cells),
        "attempts": result.attempts,
        "validity_rate": result.validity_rate,
        "seconds_per_arch": result.seconds_per_arch,
        "floored": result.floored,
        "exhausted": result.exhausted,
        "diagnostics": result.diagnostics,
        "config": {"run": args.run, "conditions": named, "gamma": args.gamma, "seed": args.seed,
                   "filter_valid": args.filter_valid, "combine_space": args.combine_space,
                   "schema": manifest.schema.to_json()},
    }
    _write_json(os.path.join(out, "sample_report.json"), report)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def _benchmark(arg: str, space: str | None):
    if arg == "synthetic":
        if space is None:
            raise UsageError("--benchmark synthetic needs --space")
        syn = SYNTH_DEFAULTS[space]
        return synth_benchmark(get_space(space), syn["weights"], syn["depth_bonus"], syn.get("noise_seed", 0),
                               syn.get("lat_table"))
    return load_benchmark(arg)


def cmd_eval(args) -> int:
    if args.runs < 1 or args.queries < 1:
        raise UsageError("--runs and --queries must be >= 1")
    cells = read_cells(args.cells)
    table = _benchmark(args.benchmark, args.space)
    training = read_cells(args.train_set) if args.train_set else None
    latency = None
    if args.latency_device:
        latency = (args.latency_device, args.latency_max)
    elif args.manifest:
        latency = latency_constraint(load_manifest(args.manifest).schema)
    report = run_eval(cells, table, args.runs, args.queries, training=training, latency=latency)
    report.config = {"cells": args.cells, "benchmark": args.benchmark, "runs": args.runs,
                     "queries": args.queries, "latency": list(latency) if latency else None}
    out = _out_dir(args, "eval")
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "eval_report.json"), report.to_json())
    print(json.dumps(report.to_json(), indent=2))
    return EXIT_OK


def cmd_analyze(args) -> int:
    generated = read_cells(args.cells)
    training = read_cells(args.train_set)
    schema = load_manifest(args.manifest).schema if args.manifest else None
    table = _benchmark(args.benchmark, args.space) if args.benchmark else None
    report = analyze(generated, training, schema, table)
    report["config"] = {"cells": args.cells, "train_set": args.train_set, "manifest": args.manifest,
                        "benchmark": args.benchmark}
    out = _out_dir(args, "analysis")
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "analysis_report.json"), report)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    if args.runs is not None or args.queries is not None:
        ev = dict(cfg.eval)
        ev.update({k: v for k, v in (("runs", args.runs), ("queries", args.queries)) if v is not None})
        cfg = replace(cfg, eval=ev)
    grid = [g for g in args.grid.split(",") if g.strip()]
    if not grid:
        raise UsageError("--grid is empty")
    rows = ablate(args.kind, grid, cfg)
    buf = io.StringIO()
    buf.write(f"# {REPORT_VERSION} {json.dumps({'config': cfg.raw, 'train': asdict(cfg.train)}, sort_keys=True)}\n")
    writer = csv.DictWriter(buf, fieldnames=ABLATION_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    out = _out_dir(args, f"ablate-{args.kind}")
    os.makedirs(out, exist_ok=True)
    _atomic_write(os.path.join(out, "ablation.csv"), buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="celldiff", description="Conditional graph diffusion for NAS cells.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a denoiser from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate cells from a trained run")
    s.add_argument("--run", required=True, help="run directory or checkpoint path")
    s.add_argument("--condition", action="append", default=[], metavar="NAME=CLASS")
    s.add_argument("--count", type=int, default=192)
    s.add_argument("--gamma", type=float, default=-4.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--filter-valid", action="store_true")
    s.add_argument("--combine-space", choices=("log", "prob"), default="log")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="search protocol over generated cells")
    e.add_argument("--cells", required=True)
    e.add_argument("--benchmark", required=True, help="JSON-lines dump or 'synthetic'")
    e.add_argument("--space", help="preset for --benchmark synthetic")
    e.add_argument("--runs", type=int, default=10)
    e.add_argument("--queries", type=int, default=192)
    e.add_argument("--train-set")
    e.add_argument("--manifest", help="take the latency constraint from this run's schema")
    e.add_argument("--latency-device")
    e.add_argument("--latency-max", type=float)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="novelty, uniqueness, feasibility")
    a.add_argument("--cells", required=True)
    a.add_argument("--train-set", required=True)
    a.add_argument("--manifest")
    a.add_argument("--benchmark")
    a.add_argument("--space")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("ablate", help="train+sample+eval sweep")
    b.add_argument("--kind", required=True, choices=("gamma", "classes", "train-size"))
    b.add_argument("--grid", required=True, help="comma-separated settings")
    b.add_argument("--config", required=True)
    b.add_argument("--seed", type=int)
    b.add_argument("--runs", type=int)
    b.add_argument("--queries", type=int)
    b.add_argument("--out")
    b.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "latency_device", None) and args.latency_max is None:
        parser.error("--latency-device needs --latency-max")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"celldiff {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"celldiff {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
