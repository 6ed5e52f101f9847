"""Tabular benchmark: synthetic desk-scale tables, JSON-lines dumps, counted queries."""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .cellgraph import CellGraph, SearchSpaceSpec, canonical_key, enumerate_space


class BenchmarkFormatError(ValueError):
    pass


@dataclass(frozen=True)
class BenchmarkRecord:
    key: bytes
    val_acc: float
    test_acc: float
    latency: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.val_acc <= 100.0 and 0.0 <= self.test_acc <= 100.0):
            raise ValueError(f"accuracies out of [0, 100]: {self.val_acc}, {self.test_acc}")
        if any(v <= 0 for v in self.latency.values()):
            raise ValueError(f"latencies must be positive: {dict(self.latency)}")

    @property
    def cell(self) -> CellGraph:
        return CellGraph.from_json(json.loads(self.key))

    def metrics(self) -> dict[str, float]:
        out = {"val_acc": self.val_acc, "test_acc": self.test_acc}
        out.update({f"latency_{dev}": ms for dev, ms in self.latency.items()})
        return out

    def to_json(self) -> dict:
        return {**json.loads(self.key), "val_acc": self.val_acc, "test_acc": self.test_acc,
                "latency": dict(self.latency)}


class _NotFound:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NOT_FOUND"

    def __bool__(self):
        return False


NOT_FOUND = _NotFound()


class BenchmarkTable:
    """Records keyed by canonical cell key, with an exact query counter."""

    def __init__(self, records: Iterable[BenchmarkRecord], provenance: str = "synthetic"):
        self.records: dict[bytes, BenchmarkRecord] = {}
        for rec in records:
            if rec.key in self.records:
                raise ValueError(f"duplicate benchmark key {rec.key!r}")
            self.records[rec.key] = rec
        self.provenance = provenance
        self._count = 0
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        return isinstance(other, BenchmarkTable) and self.records == other.records

    @property
    def query_counter(self) -> int:
        return self._count

    def reset_counter(self) -> None:
        with self._lock:
            self._count = 0

    def query(self, cell: CellGraph) -> BenchmarkRecord | _NotFound:
        """One retrieval attempt; misses cost a query too."""
        with self._lock:
            self._count += 1
        return self.records.get(canonical_key(cell), NOT_FOUND)

    def dataset(self) -> list[tuple[CellGraph, dict]]:
        """All records as ``(cell, metrics)`` pairs, in table order."""
        return [(rec.cell, rec.metrics()) for rec in self.records.values()]


def query(table: BenchmarkTable, cell: CellGraph) -> BenchmarkRecord | _NotFound:
    return table.query(cell)


def longest_path_length(cell: CellGraph) -> int:
    """Edges on the longest INPUT->OUTPUT path (0 if OUTPUT is unreachable)."""
    n = cell.n
    best = [-1] * n
    best[0] = 0
    for i in range(n):
        if best[i] < 0:
            continue
        for j in range(i + 1, n):
            if cell.e[i][j]:
                best[j] = max(best[j], best[i] + 1)
    return max(best[-1], 0)


def _hash_uniform(key: bytes, seed: int, tag: bytes) -> float:
    digest = hashlib.blake2b(key, digest_size=8, key=seed.to_bytes(8, "little", signed=True),
                             person=tag.ljust(16, b"\0")).digest()
    return int.from_bytes(digest, "little") / 2.0 ** 64


def _clamp(v: float, lo: float = 0.0, hi: float = 100.0) -> float:
    return min(max(v, lo), hi)


def synth_benchmark(space: SearchSpaceSpec, weights: Mapping[str, float], depth_bonus: float,
                    noise_seed: int, lat_table: Mapping[str, Mapping[str, float]] | None = None) -> BenchmarkTable:
    """Deterministic synthetic table over every cell of an enumerable space.

    ``val = clamp(50 + sum(op weights) + depth_bonus * longest_path + eta)``
    with ``eta`` in [-1, 1] and ``test = val + eta'`` with ``eta'`` in
    [-0.5, 0.5], both hash-seeded per cell. Latency per device is the sum of
    per-op costs.
    """
    lat_table = lat_table or {}
    records = []
    for cell in enumerate_space(space):
        key = canonical_key(cell)
        ops = [space.op_vocab[i] for i in cell.x]
        eta = 2.0 * _hash_uniform(key, noise_seed, b"val") - 1.0
        eta_test = _hash_uniform(key, noise_seed, b"test") - 0.5
        val = _clamp(50.0 + sum(weights.get(op, 0.0) for op in ops)
                     + depth_bonus * longest_path_length(cell) + eta)
        test = _clamp(val + eta_test)
        latency = {dev: sum(costs.get(op, 0.0) for op in ops) for dev, costs in lat_table.items()}
        records.append(BenchmarkRecord(key, val, test, latency))
    return BenchmarkTable(records, provenance="synthetic")


def save_benchmark(table: BenchmarkTable, path: str) -> None:
    with open(path, "w") as fh:
        for rec in table.records.values():
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def load_benchmark(path: str) -> BenchmarkTable:
    """Read a JSON-lines dump; malformed rows and duplicate cells name their line."""
    records: dict[bytes, BenchmarkRecord] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                cell = CellGraph.from_json(row)
                rec = BenchmarkRecord(canonical_key(cell), float(row["val_acc"]), float(row["test_acc"]),
                                      {str(k): float(v) for k, v in (row.get("latency") or {}).items()})
            except (ValueError, KeyError, TypeError) as exc:
                raise BenchmarkFormatError(f"{path}:{lineno}: malformed row ({exc})") from exc
            if rec.key in records:
                raise BenchmarkFormatError(f"{path}:{lineno}: duplicate cell {rec.key.decode()}")
            records[rec.key] = rec
    return BenchmarkTable(records.values(), provenance="loaded")
