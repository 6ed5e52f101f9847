"""Guided reverse diffusion: prior draw, two-pass denoising, decoding to cells."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .cellgraph import CellGraph, SearchSpaceSpec, validate_cell
from .conditioning import CombineDiagnostics, CombineSpace, ConditionVector, PredictedProbs, combine_scores
from .denoiser import Denoiser, SchemaMismatchError, predict
from .noise import Marginals, posterior_step, sample_categorical, upper_mask
from .training import RunManifest

log = logging.getLogger(__name__)

RETRY_FACTOR = 10


@dataclass(frozen=True)
class SampleRequest:
    count: int
    conditions: ConditionVector
    gamma: float = -4.0
    seed: int = 0
    filter_valid: bool = False
    combine_space: CombineSpace = "log"

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")


@dataclass
class SampleResult:
    cells: list[CellGraph]
    attempts: int
    n_valid: int
    seconds: float
    floored: int = 0
    exhausted: bool = False
    diagnostics: list[str] = field(default_factory=list)

    @property
    def validity_rate(self) -> float:
        return self.n_valid / self.attempts if self.attempts else 0.0

    @property
    def seconds_per_arch(self) -> float:
        return self.seconds / max(self.attempts, 1)


def sample_prior(space: SearchSpaceSpec, node_count_dist: dict[int, float], marginals: Marginals,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    sizes = sorted(node_count_dist)
    n = int(sizes[0] if len(sizes) == 1 else rng.choice(sizes, p=[node_count_dist[k] for k in sizes]))
    x = sample_categorical(np.broadcast_to(marginals.mX, (n, marginals.mX.size)), rng)
    e = sample_categorical(np.broadcast_to(marginals.mE, (n, n, marginals.mE.size)), rng)
    return x, np.where(upper_mask(n), e, 0)


def pin_endpoints(pX: np.ndarray, space: SearchSpaceSpec) -> np.ndarray:
    """Force INPUT/OUTPUT onto their pinned positions and off every other node.

    Works on ``(..., n, K)`` node distributions. A row left with no mass falls
    back to uniform over its allowed categories.
    """
    if not (space.input_first or space.output_last):
        return pX
    n, k = pX.shape[-2:]
    allowed = np.ones((n, k), dtype=bool)
    for on, pos, cat in ((space.input_first, 0, space.input_index),
                         (space.output_last, n - 1, space.output_index)):
        if on:
            allowed[:, cat] = False
            allowed[pos, :] = False
            allowed[pos, cat] = True
    out = np.where(allowed, pX, 0.0)
    total = out.sum(-1, keepdims=True)
    uniform = allowed / allowed.sum(-1, keepdims=True)
    return np.where(total > 0, out / np.where(total > 0, total, 1.0), uniform)


def _denoise_group(model: Denoiser, manifest: RunManifest, request: SampleRequest,
                   states: list[tuple[np.ndarray, np.ndarray]], rngs: list[np.random.Generator],
                   diag: CombineDiagnostics, poison_conditional=None):
    x = np.stack([s[0] for s in states])
    e = np.stack([s[1] for s in states])
    b = x.shape[0]
    schedule, marginals = manifest.schedule, manifest.marginals
    null = [ConditionVector.null(manifest.schema.k)] * b
    cond = [request.conditions] * b
    for t in range(schedule.T, 0, -1):
        tt = np.full(b, t)
        pu = PredictedProbs(*predict(model, x, e, tt, null))
        pc = PredictedProbs(*predict(model, x, e, tt, cond))
        if poison_conditional is not None:
            pc = poison_conditional(pc)
        p = combine_scores(pu, pc, request.gamma, request.combine_space, diag)
        post_x, post_e = posterior_step(pin_endpoints(p.pX, manifest.space), p.pE, x, e, t, schedule, marginals)
        x = np.stack([sample_categorical(post_x[i], rngs[i]) for i in range(b)])
        e = np.stack([sample_categorical(post_e[i], rngs[i]) for i in range(b)])
    return x, e


def denoise(model: Denoiser, request: SampleRequest, manifest: RunManifest,
            poison_conditional=None) -> SampleResult:
    """Sample ``request.count`` cells; with ``filter_valid`` keep only valid ones.

    Sample ``i`` draws from its own stream seeded by ``(seed, i)``. Invalid
    cells are replaced until the budget of ``10 * count`` attempts runs out.
    """
    if model.class_counts != tuple(manifest.schema.class_counts):
        raise SchemaMismatchError("checkpoint condition tables do not match the manifest schema")
    request.conditions.checked(manifest.schema)
    diag = CombineDiagnostics()
    budget = RETRY_FACTOR * request.count if request.filter_valid else request.count
    kept: list[CellGraph] = []
    attempts = n_valid = 0
    start = time.perf_counter()
    while len(kept) < request.count and attempts < budget:
        want = min(request.count - len(kept), budget - attempts)
        idx = range(attempts, attempts + want)
        rngs = [np.random.default_rng([request.seed, i]) for i in idx]
        priors = [sample_prior(manifest.space, manifest.node_count_dist, manifest.marginals, r) for r in rngs]
        by_size: dict[int, list[int]] = {}
        for pos, (px, _) in enumerate(priors):
            by_size.setdefault(px.shape[0], []).append(pos)
        finals: list[CellGraph | None] = [None] * want
        for members in by_size.values():
            xs, es = _denoise_group(model, manifest, request, [priors[p] for p in members],
                                    [rngs[p] for p in members], diag, poison_conditional)
            for row, p in enumerate(members):
                finals[p] = CellGraph.from_arrays(xs[row], es[row], provenance="generated")
        attempts += want
        for cell in finals:
            ok = validate_cell(cell, manifest.space).is_valid
            n_valid += ok
            if ok or not request.filter_valid:
                kept.append(cell)
    result = SampleResult(kept, attempts, n_valid, time.perf_counter() - start, floored=diag.floored)
    if len(kept) < request.count:
        result.exhausted = True
        msg = (f"retry budget of {budget} attempts exhausted with {len(kept)}/{request.count} "
               f"valid cells")
        result.diagnostics.append(msg)
        log.warning(msg)
    return result


def sample_rate(model: Denoiser, request: SampleRequest, manifest: RunManifest) -> float:
    """Wall-clock seconds per generated architecture (after one warm-up draw)."""
    warm = SampleRequest(1, request.conditions, request.gamma, request.seed, False, request.combine_space)
    denoise(model, warm, manifest)
    start = time.perf_counter()
    res = denoise(model, request, manifest)
    return (time.perf_counter() - start) / max(res.attempts, 1)
