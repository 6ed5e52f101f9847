"""Graph-transformer denoiser mapping a noisy cell to clean-category probabilities."""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import ConditionSchema, ConditionVector, PredictedProbs

PROB_FLOOR = 1e-12
CHECKPOINT_FORMAT = "celldiff-checkpoint/1"


class ShapeMismatchError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


class SchemaMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    n_layers: int = 5
    hidden_dim: int = 64
    n_heads: int = 4
    pe_dim: int | None = None
    dropout: float = 0.0
    ffn_mult: int = 2

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.hidden_dim % self.n_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        pe = self.positional_dim
        if pe % 2 or pe > self.hidden_dim:
            raise ValueError(f"pe_dim must be even and <= hidden_dim, got {pe}")

    @property
    def positional_dim(self) -> int:
        return self.hidden_dim if self.pe_dim is None else self.pe_dim


def positional_encoding(n: int, dim: int) -> np.ndarray:
    """Sinusoidal table: ``sin(p / 10000^(2i/dim))`` at column 2i, ``cos`` at 2i+1."""
    if dim % 2:
        raise ValueError(f"positional encoding width must be even, got {dim}")
    return _sinusoid(np.arange(n, dtype=np.float64), dim)


def _sinusoid(positions: np.ndarray, dim: int) -> np.ndarray:
    freq = 1.0 / 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = positions[:, None] * freq[None, :]
    out = np.empty((positions.shape[0], dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


class GraphTransformerLayer(nn.Module):
    """Multi-head node attention with edge-biased scores and edge-carrying values.

    Edges are updated from the pre-softmax score tensor.
    """

    def __init__(self, hidden: int, heads: int, ffn_mult: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(hidden, hidden)
        self.k = nn.Linear(hidden, hidden)
        self.v = nn.Linear(hidden, hidden)
        self.edge_bias = nn.Linear(hidden, hidden)
        self.edge_val = nn.Linear(hidden, hidden)
        self.out_x = nn.Linear(hidden, hidden)
        self.out_e = nn.Linear(hidden, hidden)
        self.ff_x1 = nn.Linear(hidden, ffn_mult * hidden)
        self.ff_x2 = nn.Linear(ffn_mult * hidden, hidden)
        self.ff_e1 = nn.Linear(hidden, ffn_mult * hidden)
        self.ff_e2 = nn.Linear(ffn_mult * hidden, hidden)
        self.norm_x1 = nn.LayerNorm(hidden)
        self.norm_x2 = nn.LayerNorm(hidden)
        self.norm_e1 = nn.LayerNorm(hidden)
        self.norm_e2 = nn.LayerNorm(hidden)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, e: torch.Tensor):
        b, n, h = x.shape
        d = h // self.heads
        q = self.q(x).view(b, n, self.heads, d)
        k = self.k(x).view(b, n, self.heads, d)
        v = self.v(x).view(b, n, self.heads, d)
        scores = q.unsqueeze(2) * k.unsqueeze(1) / math.sqrt(d)
        scores = scores + self.edge_bias(e).view(b, n, n, self.heads, d)
        attn = torch.softmax(scores.sum(-1), dim=2)
        agg = torch.einsum("bijh,bjhd->bihd", attn, v)
        agg = agg + torch.einsum("bijh,bijhd->bihd", attn, self.edge_val(e).view(b, n, n, self.heads, d))
        agg = agg.reshape(b, n, h)

        x = self.norm_x1(x + self.dropout(self.out_x(agg)))
        x = self.norm_x2(x + self.dropout(self.ff_x2(F.relu(self.ff_x1(x)))))
        e = self.norm_e1(e + self.dropout(self.out_e(scores.reshape(b, n, n, h))))
        e = self.norm_e2(e + self.dropout(self.ff_e2(F.relu(self.ff_e1(e)))))
        return x, e


class Denoiser(nn.Module):
    """Predicts per-node and per-edge clean-category distributions.

    Timestep and condition embeddings are summed into one global vector that
    is projected and added to every node and edge feature; the positional
    table is then added to the node features.
    """

    def __init__(self, config: DenoiserConfig, n_ops: int, n_edge_types: int,
                 class_counts: Sequence[int], T: int, seed: int = 0):
        super().__init__()
        self.config = config
        self.n_ops = n_ops
        self.n_edge_types = n_edge_types
        self.class_counts = tuple(int(c) for c in class_counts)
        self.T = T
        h = config.hidden_dim
        self.node_in1 = nn.Linear(n_ops, h)
        self.node_in2 = nn.Linear(h, h)
        # each position sees both e_ij and e_ji, so nodes can read incoming edges
        self.edge_in1 = nn.Linear(2 * n_edge_types, h)
        self.edge_in2 = nn.Linear(h, h)
        self.time_proj = nn.Linear(h, h)
        # row d of each table is the null token
        self.cond_emb = nn.ModuleList(nn.Embedding(d + 1, h) for d in self.class_counts)
        self.glob_x = nn.Linear(h, h)
        self.glob_e = nn.Linear(h, h)
        self.layers = nn.ModuleList(
            GraphTransformerLayer(h, config.n_heads, config.ffn_mult, config.dropout)
            for _ in range(config.n_layers))
        self.head_x1 = nn.Linear(h, h)
        self.head_x = nn.Linear(h, n_ops)
        self.head_e1 = nn.Linear(h, h)
        self.head_e = nn.Linear(h, n_edge_types)
        self.double()
        self.reset_parameters(seed)
        self.forward_calls = 0

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    bound = 1.0 / math.sqrt(module.in_features)
                    module.weight.uniform_(-bound, bound, generator=gen)
                    module.bias.uniform_(-bound, bound, generator=gen)
                elif isinstance(module, nn.Embedding):
                    module.weight.normal_(0.0, 0.02, generator=gen)
                elif isinstance(module, nn.LayerNorm):
                    module.weight.fill_(1.0)
                    module.bias.fill_(0.0)

    def forward(self, x_t: torch.Tensor, e_t: torch.Tensor, t: torch.Tensor,
                cond: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Batched logits-to-probabilities pass.

        ``x_t (B, n)`` and ``e_t (B, n, n)`` hold category indices, ``t (B,)``
        timesteps and ``cond (B, k)`` embedding rows (null = class count).
        """
        b, n = x_t.shape
        if e_t.shape != (b, n, n):
            raise ShapeMismatchError(f"edge states {tuple(e_t.shape)} do not match nodes {(b, n)}")
        if t.shape != (b,) or cond.shape != (b, len(self.class_counts)):
            raise ShapeMismatchError("timestep / condition batch shapes do not match the graph batch")
        self.forward_calls += b
        h = self.config.hidden_dim
        xo = F.one_hot(x_t, self.n_ops).double()
        eo = F.one_hot(e_t, self.n_edge_types).double()
        eo = torch.cat([eo, eo.transpose(1, 2)], dim=-1)
        hx = self.node_in2(F.relu(self.node_in1(xo)))
        he = self.edge_in2(F.relu(self.edge_in1(eo)))

        temb = torch.from_numpy(_sinusoid(t.double().numpy(), h))
        g = self.time_proj(temb)
        for idx, table in enumerate(self.cond_emb):
            g = g + table(cond[:, idx])
        hx = hx + self.glob_x(g)[:, None, :]
        he = he + self.glob_e(g)[:, None, None, :]
        pe_dim = self.config.positional_dim
        pe = torch.from_numpy(positional_encoding(n, pe_dim))
        hx = torch.cat([hx[..., :pe_dim] + pe, hx[..., pe_dim:]], dim=-1)

        for layer in self.layers:
            hx, he = layer(hx, he)
        logits_x = self.head_x(F.relu(self.head_x1(hx)))
        logits_e = self.head_e(F.relu(self.head_e1(he)))
        return torch.softmax(logits_x, dim=-1), torch.softmax(logits_e, dim=-1)

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self.state_dict().items()}


def _cond_tensor(conds: Sequence[ConditionVector], class_counts: Sequence[int]) -> torch.Tensor:
    rows = [[d if c is None else c for c, d in zip(cv.classes, class_counts)] for cv in conds]
    return torch.tensor(rows, dtype=torch.long).reshape(len(conds), len(class_counts))


def predict(model: Denoiser, x_t, e_t, t, conds: Sequence[ConditionVector]) -> tuple[np.ndarray, np.ndarray]:
    """Batched numpy front end: index arrays in, probability arrays out."""
    x_t = torch.as_tensor(np.asarray(x_t), dtype=torch.long)
    e_t = torch.as_tensor(np.asarray(e_t), dtype=torch.long)
    t = torch.as_tensor(np.asarray(t), dtype=torch.long).reshape(-1)
    with torch.no_grad():
        px, pe = model(x_t, e_t, t, _cond_tensor(conds, model.class_counts))
    return px.numpy(), pe.numpy()


def forward(model: Denoiser, noisy: tuple[np.ndarray, np.ndarray], t: int,
            cond: ConditionVector) -> PredictedProbs:
    """Single-cell pass; ``noisy`` holds one-hot ``(n, K)`` and ``(n, n, K')`` arrays."""
    node, edge = noisy
    if node.shape[-1] != model.n_ops or edge.shape[-1] != model.n_edge_types:
        raise ShapeMismatchError(
            f"one-hot widths {node.shape[-1]}/{edge.shape[-1]} do not match vocab "
            f"{model.n_ops}/{model.n_edge_types}")
    if not 1 <= t <= model.T:
        raise ValueError(f"t={t} outside [1, {model.T}]")
    px, pe = predict(model, np.argmax(node, -1)[None], np.argmax(edge, -1)[None], [t], [cond])
    return PredictedProbs(px[0], pe[0])


@dataclass
class LossCounters:
    floored: int = 0


def loss_terms(px: torch.Tensor, pe: torch.Tensor, x0: torch.Tensor, e0: torch.Tensor,
               lam: float, counters: LossCounters | None = None) -> torch.Tensor:
    """Per-sample node CE plus ``lam`` times upper-triangle edge CE."""
    n = x0.shape[-1]
    true_x = px.gather(-1, x0.unsqueeze(-1)).squeeze(-1)
    true_e = pe.gather(-1, e0.unsqueeze(-1)).squeeze(-1)
    iu, ju = torch.triu_indices(n, n, offset=1)
    true_e = true_e[:, iu, ju]
    if counters is not None:
        counters.floored += int((true_x < PROB_FLOOR).sum()) + int((true_e < PROB_FLOOR).sum())
    node_ce = -torch.log(true_x.clamp_min(PROB_FLOOR)).sum(-1)
    edge_ce = -torch.log(true_e.clamp_min(PROB_FLOOR)).sum(-1)
    if lam == 0:
        return node_ce
    return node_ce + lam * edge_ce


def loss(p_hat: PredictedProbs, clean: tuple[np.ndarray, np.ndarray], lam: float,
         counters: LossCounters | None = None) -> float:
    if lam < 0:
        raise ValueError("edge weight must be >= 0")
    node, edge = clean
    if p_hat.pX.shape != node.shape or p_hat.pE.shape != edge.shape:
        raise ShapeMismatchError("prediction and clean cell shapes differ")
    out = loss_terms(torch.from_numpy(p_hat.pX)[None], torch.from_numpy(p_hat.pE)[None],
                     torch.from_numpy(np.argmax(node, -1))[None],
                     torch.from_numpy(np.argmax(edge, -1))[None], lam, counters)
    return float(out[0])


@dataclass(frozen=True)
class TrainingSample:
    x_t: np.ndarray
    e_t: np.ndarray
    t: int
    cond: ConditionVector
    x0: np.ndarray
    e0: np.ndarray


def batch_loss(model: Denoiser, batch: Sequence[TrainingSample], lam: float,
               counters: LossCounters | None = None) -> torch.Tensor:
    """Mean loss over ``batch`` (graph kept for backward)."""
    if not batch:
        raise ValueError("empty batch")
    x_t = torch.from_numpy(np.stack([s.x_t for s in batch])).long()
    e_t = torch.from_numpy(np.stack([s.e_t for s in batch])).long()
    t = torch.tensor([s.t for s in batch], dtype=torch.long)
    cond = _cond_tensor([s.cond for s in batch], model.class_counts)
    px, pe = model(x_t, e_t, t, cond)
    per_sample = loss_terms(px, pe, torch.from_numpy(np.stack([s.x0 for s in batch])).long(),
                            torch.from_numpy(np.stack([s.e0 for s in batch])).long(), lam, counters)
    finite = torch.isfinite(per_sample)
    if not bool(finite.all()):
        idx = int(torch.nonzero(~finite)[0, 0])
        raise NonFiniteLossError(f"non-finite loss at batch sample {idx} (t={batch[idx].t})")
    return per_sample.mean()


def grad(model: Denoiser, batch: Sequence[TrainingSample], lam: float) -> dict[str, np.ndarray]:
    """Reverse-mode gradient of the mean loss for every named parameter."""
    model.zero_grad(set_to_none=True)
    batch_loss(model, batch, lam).backward()
    out = {}
    for name, p in model.named_parameters():
        out[name] = np.zeros(tuple(p.shape)) if p.grad is None else p.grad.detach().numpy().copy()
    model.zero_grad(set_to_none=True)
    return out


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: Denoiser, schema: ConditionSchema, path: str) -> None:
    params = {name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
              for name, arr in model.named_arrays().items()}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "n_ops": model.n_ops,
        "n_edge_types": model.n_edge_types,
        "class_counts": list(model.class_counts),
        "T": model.T,
        "schema_hash": schema.hash(),
        "params": params,
    }
    _atomic_write(path, json.dumps(payload, sort_keys=True))


def load_checkpoint(path: str, schema: ConditionSchema | None = None) -> Denoiser:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if schema is not None and payload["schema_hash"] != schema.hash():
        raise SchemaMismatchError(
            f"checkpoint schema hash {payload['schema_hash']} != manifest schema {schema.hash()}")
    model = Denoiser(DenoiserConfig(**payload["config"]), payload["n_ops"], payload["n_edge_types"],
                     payload["class_counts"], payload["T"])
    state = {name: torch.tensor(p["data"], dtype=torch.float64).reshape(p["shape"])
             for name, p in payload["params"].items()}
    model.load_state_dict(state)
    return model
