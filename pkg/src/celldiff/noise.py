"""Cosine schedule, marginal transition kernels, forward noising and reverse posterior."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Literal

import numpy as np

from .cellgraph import CellGraph, SearchSpaceSpec

Level = Literal["cumulative", "step"]


class ImpossibleTransitionError(ArithmeticError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    s: float
    abar: np.ndarray

    def cumulative_alpha(self, t: int) -> float:
        """Signal kept after ``t`` noising steps; the clean state (t=0) keeps all of it."""
        return 1.0 if t == 0 else float(self.abar[t])

    def step_alpha(self, t: int) -> float:
        prev = self.cumulative_alpha(t - 1)
        if prev == 0.0:
            raise ZeroDivisionError(f"abar[{t - 1}] is 0, single-step ratio undefined")
        return float(self.abar[t]) / prev


def build_schedule(T: int, s: float = 0.008) -> DiffusionSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < s < 0.1:
        raise ValueError(f"offset s must lie in (0, 0.1), got {s}")
    t = np.arange(T + 1, dtype=np.float64)
    abar = np.cos(0.5 * math.pi * (t / T + s) / (1 + s)) ** 2
    abar.setflags(write=False)
    return DiffusionSchedule(T=T, s=s, abar=abar)


@dataclass(frozen=True)
class Marginals:
    mX: np.ndarray
    mE: np.ndarray

    def __post_init__(self):
        for name, m in (("mX", self.mX), ("mE", self.mE)):
            if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} is not a probability vector: {m}")

    @classmethod
    def from_cells(cls, cells: Iterable[CellGraph], space: SearchSpaceSpec) -> "Marginals":
        """Empirical op frequencies over all nodes, edge-category frequencies over i<j."""
        node_counts = np.zeros(space.n_ops)
        edge_counts = np.zeros(space.n_edge_types)
        iu = np.triu_indices(space.n_nodes, k=1)
        n_cells = 0
        for cell in cells:
            node_counts += np.bincount(cell.x, minlength=space.n_ops)
            edge_counts += np.bincount(np.asarray(cell.e)[iu], minlength=space.n_edge_types)
            n_cells += 1
        if n_cells == 0:
            raise ValueError("cannot compute marginals of an empty dataset")
        return cls(node_counts / node_counts.sum(), edge_counts / edge_counts.sum())

    def to_json(self) -> dict:
        return {"mX": self.mX.tolist(), "mE": self.mE.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Marginals":
        return cls(np.asarray(obj["mX"], dtype=np.float64), np.asarray(obj["mE"], dtype=np.float64))


@dataclass(frozen=True)
class TransitionKernel:
    QX: np.ndarray
    QE: np.ndarray
    level: Level
    t: int


def marginal_kernel(alpha: float, m: np.ndarray) -> np.ndarray:
    """``alpha * I + (1 - alpha) * 1 m'``."""
    k = m.shape[0]
    return alpha * np.eye(k) + (1.0 - alpha) * np.broadcast_to(m, (k, k))


def kernel_at(schedule: DiffusionSchedule, marginals: Marginals, t: int,
              level: Level = "cumulative") -> TransitionKernel:
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [1, {schedule.T}]")
    if level == "cumulative":
        alpha = schedule.cumulative_alpha(t)
    elif level == "step":
        alpha = schedule.step_alpha(t)
    else:
        raise ValueError(f"unknown kernel level {level!r}")
    return TransitionKernel(marginal_kernel(alpha, marginals.mX), marginal_kernel(alpha, marginals.mE),
                            level, t)


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of ``probs`` (last axis = categories) by inverse CDF."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1]) * cdf[..., -1]
    idx = (cdf <= u[..., None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def upper_mask(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def noisy_distributions(x: np.ndarray, e: np.ndarray, alpha, marginals: Marginals):
    """Rows ``onehot @ Qbar`` for category-index arrays ``x (..., n)`` and ``e (..., n, n)``.

    ``alpha`` broadcasts over the leading axes. Frozen edge positions (diagonal
    and below) stay a point mass on category 0.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    n = x.shape[-1]
    kx, ke = marginals.mX.shape[0], marginals.mE.shape[0]
    ax = alpha.reshape(alpha.shape + (1, 1))
    px = ax * np.eye(kx)[x] + (1.0 - ax) * marginals.mX
    ae = alpha.reshape(alpha.shape + (1, 1, 1))
    pe = ae * np.eye(ke)[e] + (1.0 - ae) * marginals.mE
    pe = np.where(upper_mask(n)[..., None], pe, np.eye(ke)[0])
    return px, pe


def apply_noise(node_onehot: np.ndarray, edge_onehot: np.ndarray, t: int,
                schedule: DiffusionSchedule, marginals: Marginals,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``(X^t, E^t)`` category indices from a clean one-hot cell."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [1, {schedule.T}]")
    x = np.argmax(node_onehot, axis=-1)
    e = np.argmax(edge_onehot, axis=-1)
    px, pe = noisy_distributions(x, e, schedule.cumulative_alpha(t), marginals)
    return sample_categorical(px, rng), sample_categorical(pe, rng)


def _posterior_rows(p_hat: np.ndarray, states: np.ndarray, q_step: np.ndarray,
                    q_prev: np.ndarray, t: int, what: str) -> np.ndarray:
    # joint[x, a, b] = Qbar^{t-1}[x, a] * Q^t[a, b]; picked[..., x, a] at b = state
    joint = q_prev[:, :, None] * q_step[None, :, :]
    picked = joint.transpose(2, 0, 1)[states]
    norm = picked.sum(axis=-1)
    bad = (norm <= 0.0) & (p_hat > 0.0)
    if np.any(bad):
        pos = tuple(int(v) for v in np.argwhere(bad)[0])
        raise ImpossibleTransitionError(
            f"{what} at index {pos[:-1]}, t={t}: state {int(states[pos[:-1]])} unreachable "
            f"from category {pos[-1]} with positive predicted mass")
    safe = np.where(norm > 0.0, norm, 1.0)
    cond = picked / safe[..., None]
    return np.einsum("...x,...xa->...a", p_hat, cond)


def posterior_step(pX: np.ndarray, pE: np.ndarray, x_t: np.ndarray, e_t: np.ndarray, t: int,
                   schedule: DiffusionSchedule, marginals: Marginals):
    """Distributions over ``t-1`` categories given predicted clean probabilities.

    Each clean candidate ``x`` contributes ``p̂(x) * p(x^{t-1} | x^0=x, x^t)``
    with the inner factor from Bayes over the step and cumulative kernels.
    Leading batch axes are allowed. Frozen edge positions return category 0.
    """
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [1, {schedule.T}]")
    step_a = schedule.step_alpha(t)
    prev_a = schedule.cumulative_alpha(t - 1)
    post_x = _posterior_rows(pX, x_t, marginal_kernel(step_a, marginals.mX),
                             marginal_kernel(prev_a, marginals.mX), t, "node")
    n = x_t.shape[-1]
    ke = marginals.mE.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    post_e = np.broadcast_to(np.eye(ke)[0], pE.shape).copy()
    post_e[..., iu, ju, :] = _posterior_rows(
        pE[..., iu, ju, :], e_t[..., iu, ju], marginal_kernel(step_a, marginals.mE),
        marginal_kernel(prev_a, marginals.mE), t, "edge")
    return post_x, post_e
