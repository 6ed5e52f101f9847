import itertools
import math

import numpy as np
import pytest
import torch

from celldiff.cellgraph import encode_onehot, enumerate_space
from celldiff.conditioning import ConditionSchema, ConditionEntry, ConditionVector, PredictedProbs
from celldiff.denoiser import (Denoiser, DenoiserConfig, LossCounters, NonFiniteLossError, SchemaMismatchError,
                               ShapeMismatchError, TrainingSample, batch_loss, forward, grad, load_checkpoint, loss,
                               positional_encoding, predict, save_checkpoint)
from celldiff.training import AdamW

from conftest import random_simplex

# Relative error denominator: max(|fd|, |ad|, FD_FLOOR). The floor only matters
# for parameters whose gradient is exactly zero (for example null-token rows of
# condition tables that the batch never reads).
FD_FLOOR = 1e-8


def _batch(space, rng, n=3, cond=ConditionVector((0, None)), T=10):
    cells = list(enumerate_space(space))[:n]
    return [TrainingSample(rng.integers(0, space.n_ops, space.n_nodes),
                           np.triu(rng.integers(0, space.n_edge_types, (space.n_nodes,) * 2), 1),
                           int(rng.integers(1, T + 1)), cond, np.asarray(c.x), np.asarray(c.e)) for c in cells]


def test_positional_encoding_examples():
    pe = positional_encoding(64, 16)
    assert np.array_equal(pe[0, 0::2], np.zeros(8)) and np.array_equal(pe[0, 1::2], np.ones(8))
    assert np.all(np.abs(pe) <= 1.0)
    assert pe[5, 2] == pytest.approx(math.sin(5 / 10000 ** (2 / 16)), abs=1e-15)
    assert pe[5, 3] == pytest.approx(math.cos(5 / 10000 ** (2 / 16)), abs=1e-15)
    with pytest.raises(ValueError):
        positional_encoding(4, 7)


@pytest.mark.parametrize("dim", [8, 16, 64])
def test_positional_rows_pairwise_distinct(dim):
    pe = positional_encoding(64, dim)
    for p, q in itertools.combinations(range(64), 2):
        assert not np.array_equal(pe[p], pe[q]), (p, q)


def test_forward_outputs_are_distributions(tiny_model, desk):
    rng = np.random.default_rng(0)
    for cell in list(enumerate_space(desk))[:5]:
        node, edge = encode_onehot(cell, desk)
        for t in (1, 5, 10):
            out = forward(tiny_model, (node, edge), t, ConditionVector((0, None)))
            assert np.allclose(out.pX.sum(-1), 1.0, atol=1e-6) and np.all(out.pX >= 0)
            assert np.allclose(out.pE.sum(-1), 1.0, atol=1e-6) and np.all(out.pE >= 0)
    # arbitrary finite parameters still give valid outputs
    with torch.no_grad():
        for p in tiny_model.parameters():
            p.copy_(torch.from_numpy(rng.normal(0, 3, tuple(p.shape))))
    px, pe = predict(tiny_model, rng.integers(0, desk.n_ops, (4, 6)), np.zeros((4, 6, 6), int), [1, 2, 3, 4],
                     [ConditionVector.null(2)] * 4)
    assert np.all(np.isfinite(px)) and np.allclose(px.sum(-1), 1, atol=1e-6)
    assert np.all(np.isfinite(pe)) and np.allclose(pe.sum(-1), 1, atol=1e-6)


def test_forward_deterministic_and_condition_sensitive(tiny_model, desk):
    node, edge = encode_onehot(next(enumerate_space(desk)), desk)
    a = forward(tiny_model, (node, edge), 4, ConditionVector((0, 1)))
    b = forward(tiny_model, (node, edge), 4, ConditionVector((0, 1)))
    assert np.array_equal(a.pX, b.pX) and np.array_equal(a.pE, b.pE)
    c = forward(tiny_model, (node, edge), 4, ConditionVector.null(2))
    assert not np.array_equal(a.pX, c.pX)
    twin = Denoiser(tiny_model.config, desk.n_ops, desk.n_edge_types, [2, 3], T=10, seed=3)
    d = forward(twin, (node, edge), 4, ConditionVector((0, 1)))
    assert np.array_equal(a.pX, d.pX)


def test_zeroed_heads_give_exact_uniform(tiny_model, desk):
    with torch.no_grad():
        for lin in (tiny_model.head_x, tiny_model.head_e):
            lin.weight.zero_()
            lin.bias.zero_()
    node, edge = encode_onehot(next(enumerate_space(desk)), desk)
    out = forward(tiny_model, (node, edge), 3, ConditionVector.null(2))
    assert np.array_equal(out.pX, np.full_like(out.pX, 1.0 / desk.n_ops))
    assert np.array_equal(out.pE, np.full_like(out.pE, 1.0 / desk.n_edge_types))


def test_forward_shape_errors(tiny_model, desk):
    node, edge = encode_onehot(next(enumerate_space(desk)), desk)
    with pytest.raises(ShapeMismatchError):
        forward(tiny_model, (node[:, :-1], edge), 1, ConditionVector.null(2))
    with pytest.raises(ValueError):
        forward(tiny_model, (node, edge), 0, ConditionVector.null(2))
    with pytest.raises(ShapeMismatchError):
        tiny_model(torch.zeros((1, 6), dtype=torch.long), torch.zeros((1, 5, 5), dtype=torch.long),
                   torch.ones(1, dtype=torch.long), torch.zeros((1, 2), dtype=torch.long))


def test_loss_examples(desk):
    cell = next(enumerate_space(desk))
    node, edge = encode_onehot(cell, desk)
    assert loss(PredictedProbs(node.astype(float), edge.astype(float)), (node, edge), 5.0) == 0.0
    n, K, Kp = desk.n_nodes, desk.n_ops, desk.n_edge_types
    M = n * (n - 1) // 2
    uniform = PredictedProbs(np.full((n, K), 1 / K), np.full((n, n, Kp), 1 / Kp))
    for lam in (0.0, 1.0, 5.0):
        assert loss(uniform, (node, edge), lam) == pytest.approx(n * math.log(K) + lam * M * math.log(Kp),
                                                                 rel=1e-12)
    rng = np.random.default_rng(0)
    base = PredictedProbs(random_simplex(rng, (n, K)), random_simplex(rng, (n, n, Kp)))
    other = PredictedProbs(base.pX, random_simplex(rng, (n, n, Kp)))
    assert loss(base, (node, edge), 0.0) == loss(other, (node, edge), 0.0)
    assert loss(base, (node, edge), 2.0) >= 0
    with pytest.raises(ValueError):
        loss(base, (node, edge), -1.0)


def test_loss_floor_counts_instead_of_raising(desk):
    cell = next(enumerate_space(desk))
    node, edge = encode_onehot(cell, desk)
    wrong = np.roll(node, 1, axis=-1).astype(float)
    counters = LossCounters()
    value = loss(PredictedProbs(wrong, edge.astype(float)), (node, edge), 1.0, counters)
    assert counters.floored == desk.n_nodes
    assert value == pytest.approx(desk.n_nodes * -math.log(1e-12), rel=1e-12)


def test_gradient_matches_central_finite_differences(tiny_model, desk):
    rng = np.random.default_rng(0)
    batch = _batch(desk, rng)
    analytic = grad(tiny_model, batch, 5.0)
    params = dict(tiny_model.named_parameters())
    names = sorted(params)
    sizes = [params[k].numel() for k in names]
    flat = rng.choice(sum(sizes), 250, replace=False)
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for idx in flat:
        which = int(np.searchsorted(offsets, idx, side="right") - 1)
        name, k = names[which], int(idx - offsets[which])
        p = params[name].data.view(-1)
        old = p[k].item()
        with torch.no_grad():
            p[k] = old + 1e-4
            fp = float(batch_loss(tiny_model, batch, 5.0))
            p[k] = old - 1e-4
            fm = float(batch_loss(tiny_model, batch, 5.0))
            p[k] = old
        fd = (fp - fm) / 2e-4
        ad = float(analytic[name].reshape(-1)[k])
        worst = max(worst, abs(fd - ad) / max(abs(fd), abs(ad), FD_FLOOR))
    assert worst <= 1e-4


def test_unused_parameters_have_exact_zero_gradient(tiny_model, desk):
    batch = _batch(desk, np.random.default_rng(1))
    g = grad(tiny_model, batch, 0.0)
    for name in ("head_e.weight", "head_e.bias", "head_e1.weight", "head_e1.bias"):
        assert np.array_equal(g[name], np.zeros_like(g[name]))
    assert np.any(g["head_x.weight"] != 0)


def test_duplicated_batch_keeps_mean_gradient(tiny_model, desk):
    batch = _batch(desk, np.random.default_rng(2))
    g1 = grad(tiny_model, batch, 5.0)
    g2 = grad(tiny_model, batch + batch, 5.0)
    for name in g1:
        assert np.allclose(g1[name], g2[name], atol=1e-10, rtol=0), name


def test_empty_batch_and_nonfinite_loss(tiny_model, desk):
    with pytest.raises(ValueError):
        grad(tiny_model, [], 1.0)
    batch = _batch(desk, np.random.default_rng(3))
    with pytest.raises(NonFiniteLossError, match="sample 0"):
        batch_loss(tiny_model, batch, float("inf"))


def test_overfit_four_cells(desk, tiny_schema):
    model = Denoiser(DenoiserConfig(n_layers=2, hidden_dim=16, n_heads=2), desk.n_ops, desk.n_edge_types,
                     tiny_schema.class_counts, T=10, seed=0)
    rng = np.random.default_rng(0)
    batch = _batch(desk, rng, n=4)
    opt = AdamW(dict(model.named_parameters()), lr=1e-2, weight_decay=0.0)
    losses = []
    for _ in range(300):
        model.zero_grad(set_to_none=True)
        value = batch_loss(model, batch, 5.0)
        value.backward()
        opt.step({k: p.grad for k, p in model.named_parameters()})
        losses.append(float(value.detach()))
    assert losses[-1] < 0.1 * losses[0]


def test_checkpoint_roundtrip_and_schema_check(tiny_model, tiny_schema, desk, tmp_path):
    path = str(tmp_path / "ckpt.json")
    save_checkpoint(tiny_model, tiny_schema, path)
    back = load_checkpoint(path, tiny_schema)
    for (n1, a), (n2, b) in zip(tiny_model.named_arrays().items(), back.named_arrays().items()):
        assert n1 == n2 and np.array_equal(a, b)
    node, edge = encode_onehot(next(enumerate_space(desk)), desk)
    assert np.array_equal(forward(tiny_model, (node, edge), 2, ConditionVector((1, 0))).pX,
                          forward(back, (node, edge), 2, ConditionVector((1, 0))).pX)
    path2 = str(tmp_path / "ckpt2.json")
    save_checkpoint(back, tiny_schema, path2)
    assert open(path, "rb").read() == open(path2, "rb").read()
    other = ConditionSchema((ConditionEntry("acc", "val_acc", (61.0,)),))
    with pytest.raises(SchemaMismatchError):
        load_checkpoint(path, other)
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(str(tmp_path / "bad.json"))


def test_config_errors():
    with pytest.raises(ValueError):
        DenoiserConfig(hidden_dim=10, n_heads=4)
    with pytest.raises(ValueError):
        DenoiserConfig(n_layers=0)
    with pytest.raises(ValueError):
        DenoiserConfig(hidden_dim=16, n_heads=2, pe_dim=7)
