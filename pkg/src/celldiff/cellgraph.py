"""Cell DAG data model: search spaces, validity, canonical keys, one-hot codec."""

from __future__ import annotations

import enum
import graphlib
import itertools
import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

INPUT = "input"
OUTPUT = "output"
ABSENT = "absent"


class CellShapeError(ValueError):
    """A cell does not fit the search space it is checked against (caller bug)."""


class NotEnumerableError(ValueError):
    pass


class Violation(str, enum.Enum):
    CYCLE = "CYCLE"
    DISCONNECTED = "DISCONNECTED"
    BAD_INPUT_POS = "BAD_INPUT_POS"
    BAD_OUTPUT_POS = "BAD_OUTPUT_POS"
    DANGLING_NODE = "DANGLING_NODE"
    EDGE_COUNT_EXCEEDED = "EDGE_COUNT_EXCEEDED"


@dataclass(frozen=True)
class EnumerationTemplate:
    """Finite description of a space: DAG skeletons times per-slot op choices.

    ``skeletons`` are edge lists ``((i, j, category), ...)``; a fixed-skeleton
    space has exactly one. ``slots`` maps each intermediate node index to the
    op labels it may take. Node 0 is always INPUT and node n-1 OUTPUT.
    """

    skeletons: tuple[tuple[tuple[int, int, int], ...], ...]
    slots: tuple[tuple[int, tuple[str, ...]], ...]

    @property
    def size(self) -> int:
        return len(self.skeletons) * int(np.prod([len(c) for _, c in self.slots]))


@dataclass(frozen=True)
class SearchSpaceSpec:
    name: str
    n_nodes: int
    op_vocab: tuple[str, ...]
    edge_vocab: tuple[str, ...] = (ABSENT, "present")
    max_edges: int | None = None
    input_first: bool = True
    output_last: bool = True
    forward_only: bool = True
    allow_isolated: bool = False
    template: EnumerationTemplate | None = None

    def __post_init__(self):
        if self.n_nodes < 3:
            raise ValueError(f"n_nodes must be >= 3, got {self.n_nodes}")
        if self.op_vocab.count(INPUT) != 1 or self.op_vocab.count(OUTPUT) != 1:
            raise ValueError("op_vocab needs exactly one input and one output label")
        if not self.edge_vocab or self.edge_vocab[0] != ABSENT:
            raise ValueError("edge_vocab[0] must be 'absent'")
        if len(set(self.op_vocab)) != len(self.op_vocab):
            raise ValueError("duplicate labels in op_vocab")

    @property
    def input_index(self) -> int:
        return self.op_vocab.index(INPUT)

    @property
    def output_index(self) -> int:
        return self.op_vocab.index(OUTPUT)

    @property
    def n_ops(self) -> int:
        return len(self.op_vocab)

    @property
    def n_edge_types(self) -> int:
        return len(self.edge_vocab)

    @property
    def enumerable(self) -> bool:
        return self.template is not None

    def describe(self) -> dict:
        return {
            "name": self.name,
            "n_nodes": self.n_nodes,
            "op_vocab": list(self.op_vocab),
            "edge_vocab": list(self.edge_vocab),
            "max_edges": self.max_edges,
        }


@dataclass(frozen=True)
class CellGraph:
    """Node op indices ``x`` and an ``n x n`` edge-category matrix ``e``."""

    x: tuple[int, ...]
    e: tuple[tuple[int, ...], ...]
    provenance: str | None = field(default=None, compare=False)

    @classmethod
    def from_arrays(cls, x, e, provenance=None) -> "CellGraph":
        x = tuple(int(v) for v in np.asarray(x).ravel())
        e = tuple(tuple(int(v) for v in row) for row in np.asarray(e))
        return cls(x, e, provenance)

    @classmethod
    def from_edges(cls, ops: Sequence[int], edges, provenance=None) -> "CellGraph":
        """Build from op indices and ``(i, j)`` or ``(i, j, category)`` tuples."""
        n = len(ops)
        e = np.zeros((n, n), dtype=np.int64)
        for edge in edges:
            i, j = edge[0], edge[1]
            e[i, j] = edge[2] if len(edge) > 2 else 1
        return cls.from_arrays(ops, e, provenance)

    @property
    def n(self) -> int:
        return len(self.x)

    def edge_list(self) -> list[tuple[int, int, int]]:
        return [(i, j, c) for i, row in enumerate(self.e) for j, c in enumerate(row) if c]

    def to_json(self) -> dict:
        return {"x": list(self.x), "e": [list(row) for row in self.e]}

    @classmethod
    def from_json(cls, obj: dict, provenance=None) -> "CellGraph":
        return cls(tuple(int(v) for v in obj["x"]),
                   tuple(tuple(int(v) for v in row) for row in obj["e"]), provenance)


@dataclass(frozen=True)
class ValidityReport:
    violations: tuple[Violation, ...] = ()

    @property
    def is_valid(self) -> bool:
        return not self.violations


def canonical_key(cell: CellGraph) -> bytes:
    """UTF-8 JSON of ``{"e": ..., "x": ...}`` with sorted keys and no whitespace."""
    return json.dumps(cell.to_json(), sort_keys=True, separators=(",", ":")).encode("utf-8")


def _check_shape(cell: CellGraph, space: SearchSpaceSpec) -> None:
    n = space.n_nodes
    if len(cell.x) != n or len(cell.e) != n or any(len(row) != n for row in cell.e):
        raise CellShapeError(
            f"cell has {len(cell.x)} nodes / {len(cell.e)} edge rows, space {space.name!r} expects {n}")
    if any(not 0 <= v < space.n_ops for v in cell.x):
        raise CellShapeError(f"op index out of range for vocab of size {space.n_ops}: {cell.x}")
    if any(not 0 <= v < space.n_edge_types for row in cell.e for v in row):
        raise CellShapeError(f"edge category out of range for vocab of size {space.n_edge_types}")


def _reachable(start: int, adjacency: dict[int, list[int]]) -> set[int]:
    seen = {start}
    stack = [start]
    while stack:
        for nxt in adjacency[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


def validate_cell(cell: CellGraph, space: SearchSpaceSpec) -> ValidityReport:
    """Check structural rules, acyclicity and INPUT->OUTPUT connectivity.

    Raises :class:`CellShapeError` when the cell does not even fit the space.
    """
    _check_shape(cell, space)
    n = space.n_nodes
    found: set[Violation] = set()
    edges = cell.edge_list()

    if space.input_first:
        if cell.x[0] != space.input_index or cell.x.count(space.input_index) != 1:
            found.add(Violation.BAD_INPUT_POS)
    if space.output_last:
        if cell.x[-1] != space.output_index or cell.x.count(space.output_index) != 1:
            found.add(Violation.BAD_OUTPUT_POS)

    # A backward or self edge breaks the fixed topological order.
    if space.forward_only and any(j <= i for i, j, _ in edges):
        found.add(Violation.CYCLE)
    else:
        sorter = graphlib.TopologicalSorter({j: [] for j in range(n)})
        for i, j, _ in edges:
            sorter.add(j, i)
        try:
            sorter.prepare()
        except graphlib.CycleError:
            found.add(Violation.CYCLE)

    if space.max_edges is not None and len(edges) > space.max_edges:
        found.add(Violation.EDGE_COUNT_EXCEEDED)

    succ: dict[int, list[int]] = {i: [] for i in range(n)}
    pred: dict[int, list[int]] = {i: [] for i in range(n)}
    for i, j, _ in edges:
        succ[i].append(j)
        pred[j].append(i)
    from_input = _reachable(0, succ)
    to_output = _reachable(n - 1, pred)
    if n - 1 not in from_input:
        found.add(Violation.DISCONNECTED)
    for node in range(1, n - 1):
        if not succ[node] and not pred[node]:
            if not space.allow_isolated:
                found.add(Violation.DISCONNECTED)
        elif node not in from_input or node not in to_output:
            found.add(Violation.DANGLING_NODE)

    return ValidityReport(tuple(v for v in Violation if v in found))


def encode_onehot(cell: CellGraph, space: SearchSpaceSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(n, n_ops)`` node and ``(n, n, n_edge_types)`` edge one-hot arrays."""
    _check_shape(cell, space)
    x = np.asarray(cell.x)
    e = np.asarray(cell.e)
    node = np.eye(space.n_ops)[x]
    edge = np.eye(space.n_edge_types)[e]
    return node, edge


def decode_onehot(node_onehot: np.ndarray, edge_onehot: np.ndarray, provenance=None) -> CellGraph:
    return CellGraph.from_arrays(np.argmax(node_onehot, axis=-1), np.argmax(edge_onehot, axis=-1),
                                 provenance)


def enumerate_space(space: SearchSpaceSpec) -> Iterator[CellGraph]:
    """Yield every cell of an enumerable space exactly once."""
    tpl = space.template
    if tpl is None:
        raise NotEnumerableError(f"space {space.name!r} has no enumeration template")
    slot_nodes = [node for node, _ in tpl.slots]
    slot_choices = [[space.op_vocab.index(op) for op in choices] for _, choices in tpl.slots]
    if sorted(slot_nodes) != list(range(1, space.n_nodes - 1)):
        raise NotEnumerableError("template must give every intermediate node exactly one slot")
    base = [space.input_index] * (space.n_nodes - 1) + [space.output_index]
    for skeleton in tpl.skeletons:
        e = np.zeros((space.n_nodes, space.n_nodes), dtype=np.int64)
        for i, j, c in skeleton:
            e[i, j] = c
        e_rows = tuple(tuple(int(v) for v in row) for row in e)
        for combo in itertools.product(*slot_choices):
            x = list(base)
            for node, op in zip(slot_nodes, combo):
                x[node] = op
            yield CellGraph(tuple(x), e_rows, "enumerated")
