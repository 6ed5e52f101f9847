"""Training loop: per-sample noising, condition dropout, weighted cross-entropy, AdamW."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .cellgraph import CellGraph, SearchSpaceSpec, validate_cell
from .conditioning import (ConditionEntry, ConditionSchema, ConditionVector, calibrated_entry,
                           drop_conditions)
from .denoiser import (Denoiser, DenoiserConfig, TrainingSample, _atomic_write, batch_loss,
                       save_checkpoint)
from .noise import DiffusionSchedule, Marginals, build_schedule, noisy_distributions, sample_categorical
from .spaces import get_space

log = logging.getLogger(__name__)

MANIFEST_VERSION = "celldiff-run/1"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 2e-4
    weight_decay: float = 1e-12
    epsilon_dropout: float = 0.1
    lambda_edge: float = 5.0
    T: int = 500
    s: float = 0.008
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("epochs", "batch_size", "T"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.lambda_edge < 0:
            raise ValueError("learning_rate, weight_decay and lambda_edge must be >= 0")
        if not 0.0 <= self.epsilon_dropout <= 1.0:
            raise ValueError("epsilon_dropout must lie in [0, 1]")


class AdamW:
    """Adam with decoupled weight decay ``p <- p - wd * p - lr * m_hat / (sqrt(v_hat) + eps)``.

    The decay is not scaled by the learning rate, so ``lr=0`` still shrinks
    parameters by ``(1 - wd)`` per step.
    """

    def __init__(self, params: dict[str, torch.nn.Parameter], lr: float, weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {k: torch.zeros_like(p) for k, p in params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in params.items()}
        self.t = 0

    @torch.no_grad()
    def step(self, grads: dict[str, torch.Tensor | None]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            if self.weight_decay:
                p.mul_(1.0 - self.weight_decay)
            if self.lr:
                p.sub_(self.lr * (m / c1) / ((v / c2).sqrt() + self.eps))


@dataclass
class TrainState:
    model: Denoiser
    optimizer: AdamW
    rng: np.random.Generator
    step: int = 0
    loss_history: list[float] = field(default_factory=list)
    epoch_of_step: list[int] = field(default_factory=list)


def init_state(space: SearchSpaceSpec, schema: ConditionSchema, config: TrainConfig,
               denoiser_config: DenoiserConfig) -> TrainState:
    model = Denoiser(denoiser_config, space.n_ops, space.n_edge_types, schema.class_counts,
                     config.T, seed=config.seed)
    opt = AdamW(dict(model.named_parameters()), config.learning_rate, config.weight_decay,
                (config.beta1, config.beta2), config.adam_eps)
    return TrainState(model, opt, np.random.default_rng(config.seed))


def make_samples(batch: Sequence[tuple[CellGraph, ConditionVector]], schedule: DiffusionSchedule,
                 marginals: Marginals, config: TrainConfig,
                 rng: np.random.Generator) -> list[TrainingSample]:
    """Draw t, drop conditions and noise each cell independently."""
    out = []
    for cell, cond in batch:
        t = int(rng.integers(1, schedule.T + 1))
        cond = drop_conditions(cond, config.epsilon_dropout, rng)
        x0 = np.asarray(cell.x)
        e0 = np.asarray(cell.e)
        px, pe = noisy_distributions(x0, e0, schedule.cumulative_alpha(t), marginals)
        out.append(TrainingSample(sample_categorical(px, rng), sample_categorical(pe, rng), t, cond, x0, e0))
    return out


def train_step(state: TrainState, batch: Sequence[tuple[CellGraph, ConditionVector]],
               schedule: DiffusionSchedule, marginals: Marginals, config: TrainConfig,
               epoch: int = 0) -> float:
    samples = make_samples(batch, schedule, marginals, config, state.rng)
    model = state.model
    model.zero_grad(set_to_none=True)
    loss = batch_loss(model, samples, config.lambda_edge)
    loss.backward()
    state.optimizer.step({k: p.grad for k, p in model.named_parameters()})
    model.zero_grad(set_to_none=True)
    state.step += 1
    value = float(loss.detach())
    state.loss_history.append(value)
    state.epoch_of_step.append(epoch)
    return value


def build_schema(condition_specs: Sequence[dict], metrics: Sequence[dict]) -> ConditionSchema:
    """Calibrate percentile-based conditions against the dataset; fixed thresholds pass through.

    Each spec: ``{"name", "metric", "direction", "percentiles" | "thresholds"}``.
    """
    entries = []
    for spec in condition_specs:
        metric = spec.get("metric", spec["name"])
        direction = spec.get("direction", "higher")
        if "thresholds" in spec:
            entries.append(ConditionEntry(spec["name"], metric, tuple(float(v) for v in spec["thresholds"]),
                                          direction))
        elif "percentiles" in spec:
            values = [m[metric] for m in metrics]
            entries.append(calibrated_entry(spec["name"], metric, values, spec["percentiles"], direction))
        else:
            raise ValueError(f"condition {spec['name']!r} needs 'percentiles' or 'thresholds'")
    return ConditionSchema(tuple(entries))


@dataclass
class RunManifest:
    space: SearchSpaceSpec
    schedule: DiffusionSchedule
    marginals: Marginals
    schema: ConditionSchema
    node_count_dist: dict[int, float]
    train_config: TrainConfig
    denoiser_config: DenoiserConfig
    final_loss: float | None = None
    n_train: int = 0

    def to_json(self) -> dict:
        return {
            "schema_version": MANIFEST_VERSION,
            "space": self.space.name,
            "space_description": self.space.describe(),
            "T": self.schedule.T,
            "s": self.schedule.s,
            **self.marginals.to_json(),
            "node_count_dist": {str(k): v for k, v in sorted(self.node_count_dist.items())},
            "schema": self.schema.to_json(),
            "schema_hash": self.schema.hash(),
            "train_config": asdict(self.train_config),
            "denoiser_config": asdict(self.denoiser_config),
            "final_loss": self.final_loss,
            "n_train": self.n_train,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RunManifest":
        schema = ConditionSchema.from_json(obj["schema"])
        if obj.get("schema_hash") not in (None, schema.hash()):
            raise ValueError("manifest schema hash does not match its schema")
        return cls(
            space=get_space(obj["space"]),
            schedule=build_schedule(obj["T"], obj["s"]),
            marginals=Marginals.from_json(obj),
            schema=schema,
            node_count_dist={int(k): float(v) for k, v in obj["node_count_dist"].items()},
            train_config=TrainConfig(**obj["train_config"]),
            denoiser_config=DenoiserConfig(**obj["denoiser_config"]),
            final_loss=obj.get("final_loss"),
            n_train=obj.get("n_train", 0),
        )


def train_loop(dataset: Sequence[tuple[CellGraph, dict]], space: SearchSpaceSpec,
               condition_specs: Sequence[dict] | ConditionSchema, config: TrainConfig,
               denoiser_config: DenoiserConfig) -> tuple[TrainState, RunManifest]:
    """Full training run; returns the final state and the run manifest."""
    if not dataset:
        raise ValueError("empty training dataset")
    cells = [c for c, _ in dataset]
    for idx, cell in enumerate(cells):
        if not validate_cell(cell, space).is_valid:
            raise ValueError(f"training cell {idx} is not valid in space {space.name!r}")
    metrics = [m for _, m in dataset]
    schema = condition_specs if isinstance(condition_specs, ConditionSchema) \
        else build_schema(condition_specs, metrics)
    missing = {c.metric for c in schema.conditions} - set.intersection(*(set(m) for m in metrics))
    if missing:
        raise ValueError(f"dataset metrics do not cover schema metrics {sorted(missing)}")
    conds = [schema.classify(m) for m in metrics]

    schedule = build_schedule(config.T, config.s)
    marginals = Marginals.from_cells(cells, space)
    counts = Counter(c.n for c in cells)
    node_count_dist = {n: k / len(cells) for n, k in counts.items()}

    state = init_state(space, schema, config, denoiser_config)
    state.model.train()
    n = len(dataset)
    pairs = list(zip(cells, conds))
    for epoch in range(config.epochs):
        order = state.rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = [pairs[i] for i in order[start:start + config.batch_size]]
            train_step(state, batch, schedule, marginals, config, epoch)
        log.debug("epoch %d loss %.4f", epoch, state.loss_history[-1])
    state.model.eval()
    manifest = RunManifest(space, schedule, marginals, schema, node_count_dist, config, denoiser_config,
                           final_loss=state.loss_history[-1], n_train=n)
    return state, manifest


def steps_per_run(n: int, config: TrainConfig) -> int:
    return config.epochs * math.ceil(n / config.batch_size)


def write_dataset(path: str, dataset: Sequence[tuple[CellGraph, dict]]) -> None:
    lines = [json.dumps({**cell.to_json(), **metrics}, sort_keys=True) for cell, metrics in dataset]
    _atomic_write(path, "\n".join(lines) + "\n")


def save_run(run_dir: str, state: TrainState, manifest: RunManifest,
             dataset: Sequence[tuple[CellGraph, dict]] | None = None) -> dict[str, str]:
    """Write checkpoint, manifest, loss log and (optionally) the training set."""
    os.makedirs(run_dir, exist_ok=True)
    paths = {
        "checkpoint": os.path.join(run_dir, "checkpoint.json"),
        "manifest": os.path.join(run_dir, "manifest.json"),
        "log": os.path.join(run_dir, "train_log.csv"),
    }
    save_checkpoint(state.model, manifest.schema, paths["checkpoint"])
    _atomic_write(paths["manifest"], json.dumps(manifest.to_json(), sort_keys=True, indent=2))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "epoch", "loss"])
    for step, (epoch, loss) in enumerate(zip(state.epoch_of_step, state.loss_history), start=1):
        writer.writerow([step, epoch, repr(loss)])
    _atomic_write(paths["log"], buf.getvalue())
    if dataset is not None:
        paths["train_set"] = os.path.join(run_dir, "train_set.jsonl")
        write_dataset(paths["train_set"], dataset)
    return paths


def load_manifest(path: str) -> RunManifest:
    with open(path) as fh:
        return RunManifest.from_json(json.load(fh))
