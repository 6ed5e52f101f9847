"""Target discretization, condition vectors, conditional dropout and guided score combination."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

LOG_FLOOR = 1e-12

Direction = Literal["higher", "lower"]
CombineSpace = Literal["log", "prob"]

# Percentile splits used by the class-count ablation (best class first).
CLASS_SPLITS = {2: [95.0], 3: [80.0, 95.0], 4: [50.0, 80.0, 95.0], 5: [30.0, 50.0, 80.0, 95.0]}


@dataclass(frozen=True)
class ConditionEntry:
    """One discretized target.

    ``thresholds`` are ascending, in raw metric units. Class 0 is the best
    class: at or above the top threshold for ``higher``, at or below the
    lowest threshold for ``lower``.
    """

    name: str
    metric: str
    thresholds: tuple[float, ...]
    direction: Direction = "higher"
    percentiles: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.thresholds:
            raise ValueError(f"condition {self.name!r} needs at least one threshold")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError(f"thresholds of {self.name!r} must be strictly ascending")
        if self.direction not in ("higher", "lower"):
            raise ValueError(f"direction must be 'higher' or 'lower', got {self.direction!r}")

    @property
    def n_classes(self) -> int:
        return len(self.thresholds) + 1

    def to_json(self) -> dict:
        return {"name": self.name, "metric": self.metric, "thresholds": list(self.thresholds),
                "direction": self.direction,
                "percentiles": None if self.percentiles is None else list(self.percentiles)}

    @classmethod
    def from_json(cls, obj: dict) -> "ConditionEntry":
        pct = obj.get("percentiles")
        return cls(obj["name"], obj.get("metric", obj["name"]), tuple(obj["thresholds"]),
                   obj.get("direction", "higher"), None if pct is None else tuple(pct))


@dataclass(frozen=True)
class ConditionSchema:
    conditions: tuple[ConditionEntry, ...]

    def __post_init__(self):
        if not self.conditions:
            raise ValueError("schema needs at least one condition")
        names = [c.name for c in self.conditions]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate condition names: {names}")

    @property
    def k(self) -> int:
        return len(self.conditions)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.conditions]

    @property
    def class_counts(self) -> list[int]:
        return [c.n_classes for c in self.conditions]

    def entry(self, name: str) -> ConditionEntry:
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(f"unknown condition {name!r}; schema has {self.names}")

    def classify(self, metrics: dict) -> "ConditionVector":
        return ConditionVector(tuple(discretize(metrics[c.metric], c) for c in self.conditions))

    def parse(self, spec: dict[str, int]) -> "ConditionVector":
        """Build a vector from ``{name: class}``; unnamed conditions are NULL."""
        unknown = set(spec) - set(self.names)
        if unknown:
            raise KeyError(f"unknown condition(s) {sorted(unknown)}; schema has {self.names}")
        return ConditionVector(tuple(spec.get(n) for n in self.names)).checked(self)

    def to_json(self) -> dict:
        return {"conditions": [c.to_json() for c in self.conditions]}

    @classmethod
    def from_json(cls, obj: dict) -> "ConditionSchema":
        return cls(tuple(ConditionEntry.from_json(c) for c in obj["conditions"]))

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class ConditionVector:
    """Per-condition class index, ``None`` standing for the null token."""

    classes: tuple[int | None, ...]

    @classmethod
    def null(cls, k: int) -> "ConditionVector":
        return cls((None,) * k)

    @property
    def is_null(self) -> bool:
        return all(c is None for c in self.classes)

    def checked(self, schema: ConditionSchema) -> "ConditionVector":
        if len(self.classes) != schema.k:
            raise ValueError(f"condition vector has {len(self.classes)} entries, schema has {schema.k}")
        for c, entry in zip(self.classes, schema.conditions):
            if c is not None and not 0 <= c < entry.n_classes:
                raise ValueError(f"class {c} out of range for {entry.name!r} ({entry.n_classes} classes)")
        return self

    def indices(self, schema: ConditionSchema) -> list[int]:
        """Embedding rows; the null token is row ``d`` of each table."""
        return [entry.n_classes if c is None else c for c, entry in zip(self.classes, schema.conditions)]


@dataclass(frozen=True)
class GuidanceConfig:
    gamma: float = -4.0
    epsilon: float = 0.1
    combine_space: CombineSpace = "log"

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")


def calibrate_splits(values: Sequence[float], percentiles: Sequence[float]) -> tuple[float, ...]:
    """Empirical percentiles with linear interpolation between order statistics."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise ValueError("need at least two metric values to calibrate splits")
    pct = np.asarray(percentiles, dtype=np.float64)
    if np.any((pct <= 0) | (pct >= 100)) or np.any(np.diff(pct) <= 0):
        raise ValueError(f"percentiles must be ascending inside (0, 100): {list(percentiles)}")
    return tuple(float(v) for v in np.percentile(values, pct, method="linear"))


def calibrated_entry(name: str, metric: str, values, percentiles, direction: Direction = "higher") -> ConditionEntry:
    thresholds = calibrate_splits(values, percentiles)
    # Constant samples give repeated thresholds; keep the distinct ones.
    uniq = tuple(sorted(set(thresholds)))
    return ConditionEntry(name, metric, uniq, direction, tuple(float(p) for p in percentiles))


def discretize(value: float, entry: ConditionEntry) -> int:
    """Class index with 0 the best class; a value on a threshold goes to the better side."""
    thr = entry.thresholds
    if entry.direction == "higher":
        # count thresholds strictly above the value
        return int(sum(1 for th in thr if value < th))
    return int(sum(1 for th in thr if value > th))


def drop_conditions(cond: ConditionVector, epsilon: float, rng: np.random.Generator) -> ConditionVector:
    """Replace the whole vector by nulls with probability ``epsilon``."""
    if rng.random() < epsilon:
        return ConditionVector.null(len(cond.classes))
    return cond


@dataclass
class CombineDiagnostics:
    floored: int = 0


@dataclass(frozen=True)
class PredictedProbs:
    pX: np.ndarray
    pE: np.ndarray


def _combine(pu: np.ndarray, pc: np.ndarray, gamma: float, space: CombineSpace,
             diag: CombineDiagnostics, what: str) -> np.ndarray:
    if space == "log":
        logp = (1.0 - gamma) * np.log(np.maximum(pu, LOG_FLOOR)) + gamma * np.log(np.maximum(pc, LOG_FLOOR))
        logp -= logp.max(axis=-1, keepdims=True)
        out = np.exp(logp)
    elif space == "prob":
        out = (1.0 - gamma) * pu + gamma * pc
        neg = out < 0
        diag.floored += int(neg.sum())
        out = np.where(neg, 0.0, out)
    else:
        raise ValueError(f"unknown combine space {space!r}")
    total = out.sum(axis=-1, keepdims=True)
    if np.any(total <= 0) or not np.all(np.isfinite(total)):
        row = tuple(int(v) for v in np.argwhere(~(total[..., 0] > 0))[0])
        raise ArithmeticError(f"{what} row {row} has no probability mass after combination")
    return out / total


def combine_scores(p_u: PredictedProbs, p_c: PredictedProbs, gamma: float,
                   combine_space: CombineSpace = "log",
                   diagnostics: CombineDiagnostics | None = None) -> PredictedProbs:
    """``(1 - gamma) * uncond + gamma * cond``, per category, in log or probability space."""
    if gamma == 0.0:
        return PredictedProbs(p_u.pX.copy(), p_u.pE.copy())
    if gamma == 1.0:
        return PredictedProbs(p_c.pX.copy(), p_c.pE.copy())
    if p_u.pX.shape != p_c.pX.shape or p_u.pE.shape != p_c.pE.shape:
        raise ValueError("conditional and unconditional predictions differ in shape")
    diag = diagnostics if diagnostics is not None else CombineDiagnostics()
    return PredictedProbs(_combine(p_u.pX, p_c.pX, gamma, combine_space, diag, "node"),
                          _combine(p_u.pE, p_c.pE, gamma, combine_space, diag, "edge"))
