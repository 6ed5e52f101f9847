"""Search evaluation, generation analysis and ablation sweeps."""

from __future__ import annotations

import json
import math
import os
import random
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Iterable, Sequence

import numpy as np

from .bench import BenchmarkTable, load_benchmark, save_benchmark, synth_benchmark
from .cellgraph import CellGraph, canonical_key
from .conditioning import CLASS_SPLITS, ConditionSchema
from .denoiser import DenoiserConfig, _atomic_write
from .sampling import SampleRequest, denoise
from .spaces import SYNTH_DEFAULTS, get_space
from .training import TrainConfig, save_run, train_loop

REPORT_VERSION = "celldiff-report/1"


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field {field_name!r}: {message}")
        self.field = field_name


@dataclass
class EvalReport:
    runs: int
    queries_per_run: int
    max_val_acc_mean: float
    max_val_acc_std: float
    corresponding_test_acc_mean: float
    query_counter: int
    novelty_pct: float | None = None
    uniqueness_pct: float | None = None
    feasibility_pct: float | None = None
    seconds_per_arch: float | None = None
    per_run: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"schema_version": REPORT_VERSION, **asdict(self)}


def read_cells(path: str) -> list[CellGraph]:
    with open(path) as fh:
        return [CellGraph.from_json(json.loads(line)) for line in fh if line.strip()]


def write_cells(path: str, cells: Iterable[CellGraph]) -> None:
    _atomic_write(path, "".join(json.dumps(c.to_json(), separators=(",", ":")) + "\n" for c in cells))


def novelty_pct(generated: Sequence[CellGraph], training: Iterable[CellGraph]) -> float:
    """Percentage of generations whose exact representation is absent from the training set."""
    if not generated:
        return 0.0
    seen = {canonical_key(c) for c in training}
    return 100.0 * sum(canonical_key(c) not in seen for c in generated) / len(generated)


def uniqueness_pct(generated: Sequence[CellGraph]) -> float:
    """Generations whose representation occurs exactly once, over all generations."""
    if not generated:
        return 0.0
    counts = Counter(canonical_key(c) for c in generated)
    return 100.0 * sum(1 for k in counts.values() if k == 1) / len(generated)


def latency_constraint(schema: ConditionSchema) -> tuple[str, float] | None:
    """``(device, max_ms)`` of the first lower-is-better latency condition, if any."""
    for entry in schema.conditions:
        if entry.direction == "lower" and entry.metric.startswith("latency_"):
            return entry.metric[len("latency_"):], entry.thresholds[0]
    return None


def feasibility_pct(generated: Sequence[CellGraph], table: BenchmarkTable, device: str,
                    max_ms: float) -> float:
    """Share of generations meeting the latency constraint; unknown cells count as infeasible.

    Reads the table directly and does not touch the query counter.
    """
    if not generated:
        return 0.0
    ok = 0
    for cell in generated:
        rec = table.records.get(canonical_key(cell))
        if rec is not None and device in rec.latency and rec.latency[device] <= max_ms:
            ok += 1
    return 100.0 * ok / len(generated)


def run_eval(cells: Sequence[CellGraph], table: BenchmarkTable, runs: int, queries: int,
             training: Sequence[CellGraph] | None = None,
             latency: tuple[str, float] | None = None) -> EvalReport:
    """Query ``queries`` cells per run in generation order; report max val and its test acc."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if queries < 1:
        raise ValueError("queries per run must be >= 1")
    need = runs * queries
    if len(cells) < need:
        raise ValueError(f"need {need} generated cells for {runs} runs x {queries} queries, got {len(cells)}")
    start_count = table.query_counter
    best_val, best_test, per_run = [], [], []
    feasible = 0
    for r in range(runs):
        chunk = cells[r * queries:(r + 1) * queries]
        top = None
        for cell in chunk:
            rec = table.query(cell)
            if not rec:
                continue
            if latency is not None and rec.latency.get(latency[0], math.inf) <= latency[1]:
                feasible += 1
            if top is None or rec.val_acc > top.val_acc:
                top = rec
        # a run without a single hit scores 0
        best_val.append(top.val_acc if top else 0.0)
        best_test.append(top.test_acc if top else 0.0)
        per_run.append({"run": r, "max_val_acc": best_val[-1], "test_acc": best_test[-1]})
    used = cells[:need]
    spent = table.query_counter - start_count
    if spent != need:
        raise AssertionError(f"query accounting drifted: spent {spent}, expected {need}")
    return EvalReport(
        runs=runs, queries_per_run=queries,
        max_val_acc_mean=float(np.mean(best_val)), max_val_acc_std=float(np.std(best_val)),
        corresponding_test_acc_mean=float(np.mean(best_test)), query_counter=spent,
        novelty_pct=None if training is None else novelty_pct(used, training),
        uniqueness_pct=uniqueness_pct(used),
        feasibility_pct=None if latency is None else 100.0 * feasible / need,
        per_run=per_run,
    )


def analyze(generated: Sequence[CellGraph], training: Sequence[CellGraph],
            schema: ConditionSchema | None = None, table: BenchmarkTable | None = None) -> dict:
    report: dict[str, Any] = {
        "schema_version": REPORT_VERSION,
        "generations": len(generated),
        "novelty_pct": novelty_pct(generated, training),
        "uniqueness_pct": uniqueness_pct(generated),
        "feasibility_pct": None,
    }
    constraint = latency_constraint(schema) if schema is not None else None
    if constraint is not None and table is not None:
        report["feasibility_pct"] = feasibility_pct(generated, table, *constraint)
        report["latency_constraint"] = {"device": constraint[0], "max_ms": constraint[1]}
    return report


# --- run configuration -------------------------------------------------------

@dataclass
class RunConfig:
    """Parsed training / pipeline config file."""

    name: str
    space: str
    conditions: list[dict]
    train: TrainConfig
    denoiser: DenoiserConfig
    dataset: str | None = None
    synthetic: dict | None = None
    train_size: int | None = None
    sample: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)


def parse_config(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    space = obj.get("space")
    if not isinstance(space, str):
        raise ConfigError("space", "missing or not a string")
    try:
        get_space(space)
    except KeyError as exc:
        raise ConfigError("space", str(exc)) from None
    dataset, synthetic = obj.get("dataset"), obj.get("synthetic")
    if dataset is None and synthetic is None:
        raise ConfigError("dataset", "give a dataset path or a 'synthetic' benchmark spec")
    if synthetic == "default":
        if space not in SYNTH_DEFAULTS:
            raise ConfigError("synthetic", f"no synthetic defaults for space {space!r}")
        synthetic = dict(SYNTH_DEFAULTS[space])
    if synthetic is not None and not isinstance(synthetic, dict):
        raise ConfigError("synthetic", "must be an object or the string 'default'")
    conditions = obj.get("conditions")
    if not isinstance(conditions, list) or not conditions:
        raise ConfigError("conditions", "need a non-empty list of condition specs")
    for i, c in enumerate(conditions):
        if not isinstance(c, dict) or "name" not in c:
            raise ConfigError(f"conditions[{i}]", "each condition needs a 'name'")
        if "percentiles" not in c and "thresholds" not in c:
            raise ConfigError(f"conditions[{i}]", "needs 'percentiles' or 'thresholds'")
    try:
        train = TrainConfig(**obj.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError("train", str(exc)) from None
    try:
        denoiser = DenoiserConfig(**obj.get("denoiser", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError("denoiser", str(exc)) from None
    train_size = obj.get("train_size")
    if train_size is not None and (not isinstance(train_size, int) or train_size < 1):
        raise ConfigError("train_size", "must be a positive integer")
    return RunConfig(name=str(obj.get("name", space)), space=space, conditions=conditions, train=train,
                     denoiser=denoiser, dataset=dataset, synthetic=synthetic, train_size=train_size,
                     sample=dict(obj.get("sample", {})), eval=dict(obj.get("eval", {})), raw=obj)


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"not valid JSON ({exc})") from None
    return parse_config(obj)


def benchmark_for(cfg: RunConfig) -> BenchmarkTable:
    if cfg.dataset is not None:
        return load_benchmark(cfg.dataset)
    syn = cfg.synthetic
    return synth_benchmark(get_space(cfg.space), syn.get("weights", {}), float(syn.get("depth_bonus", 0.0)),
                           int(syn.get("noise_seed", 0)), syn.get("lat_table"))


def training_dataset(cfg: RunConfig, table: BenchmarkTable) -> list[tuple[CellGraph, dict]]:
    data = table.dataset()
    if cfg.train_size is not None and cfg.train_size < len(data):
        picker = random.Random(cfg.train.seed)
        data = [data[i] for i in sorted(picker.sample(range(len(data)), cfg.train_size))]
    return data


def train_run(cfg: RunConfig, run_dir: str | None = None):
    """Train per ``cfg``; when ``run_dir`` is given write all run artifacts there."""
    table = benchmark_for(cfg)
    dataset = training_dataset(cfg, table)
    state, manifest = train_loop(dataset, get_space(cfg.space), cfg.conditions, cfg.train, cfg.denoiser)
    paths = {}
    if run_dir is not None:
        paths = save_run(run_dir, state, manifest, dataset)
        if table.provenance == "synthetic":
            paths["benchmark"] = os.path.join(run_dir, "benchmark.jsonl")
            save_benchmark(table, paths["benchmark"])
        with open(os.path.join(run_dir, "config.json"), "w") as fh:
            json.dump(cfg.raw, fh, sort_keys=True, indent=2)
    return state, manifest, table, dataset, paths


def pipeline(cfg: RunConfig, gamma: float | None = None, trained=None) -> EvalReport:
    """Train (unless ``trained`` is given), sample R x Q cells, evaluate."""
    state, manifest, table, dataset, _ = trained or train_run(cfg)
    runs = int(cfg.eval.get("runs", 10))
    queries = int(cfg.eval.get("queries", 192))
    conds = manifest.schema.parse(cfg.sample.get("conditions", {manifest.schema.names[0]: 0}))
    g = float(cfg.sample.get("gamma", -4.0) if gamma is None else gamma)
    req = SampleRequest(runs * queries, conds, g, int(cfg.sample.get("seed", 0)),
                        bool(cfg.sample.get("filter_valid", False)), cfg.sample.get("combine_space", "log"))
    result = denoise(state.model, req, manifest)
    table.reset_counter()
    report = run_eval(result.cells, table, runs, queries, training=[c for c, _ in dataset],
                      latency=latency_constraint(manifest.schema))
    report.seconds_per_arch = result.seconds_per_arch
    report.config = {"gamma": g, "conditions": list(conds.classes), "train": asdict(cfg.train),
                     "schema": manifest.schema.to_json()}
    return report


ABLATION_FIELDS = ["kind", "setting", "max_val_acc_mean", "max_val_acc_std", "corresponding_test_acc_mean",
                   "novelty_pct", "uniqueness_pct", "feasibility_pct", "seconds_per_arch", "query_counter",
                   "error"]


def ablate(kind: str, grid: Sequence, base: RunConfig) -> list[dict]:
    """One train+sample+eval cycle per grid setting; failures land in the row's ``error``."""
    if not grid:
        raise ValueError("ablation grid is empty")
    rows = []
    shared = None
    for setting in grid:
        row: dict[str, Any] = {"kind": kind, "setting": setting}
        try:
            if kind == "gamma":
                # training does not depend on gamma and is deterministic, so it is shared
                shared = shared or train_run(base)
                report = pipeline(base, gamma=float(setting), trained=shared)
            elif kind == "classes":
                d = int(setting)
                if d not in CLASS_SPLITS:
                    raise ValueError(f"no percentile split defined for d={d}")
                conds = [dict(c) for c in base.conditions]
                conds[0] = {k: v for k, v in conds[0].items() if k != "thresholds"}
                conds[0]["percentiles"] = CLASS_SPLITS[d]
                report = pipeline(replace(base, conditions=conds))
            elif kind == "train-size":
                report = pipeline(replace(base, train_size=int(setting)))
            else:
                raise ValueError(f"unknown ablation kind {kind!r}")
            row.update({k: getattr(report, k) for k in ABLATION_FIELDS[2:-1]})
            row["error"] = ""
        except Exception as exc:  # noqa: BLE001 - sweep keeps going
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows
