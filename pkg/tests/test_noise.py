import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from celldiff.cellgraph import CellGraph, encode_onehot, enumerate_space
from celldiff.noise import (DiffusionSchedule, ImpossibleTransitionError, Marginals, apply_noise, build_schedule, kernel_at,
                            marginal_kernel, posterior_step, sample_categorical)

from conftest import random_simplex
from oracles import bayes_posterior, cosine_abar, step_kernel, tv


def test_schedule_matches_cosine_formula():
    sch = build_schedule(500, 0.008)
    assert sch.abar[250] == pytest.approx(math.cos(0.5 * math.pi * (0.508 / 1.008)) ** 2, abs=1e-15)
    for t in (0, 1, 17, 499, 500):
        assert sch.abar[t] == pytest.approx(cosine_abar(t, 500), abs=1e-15)
    assert abs(sch.abar[-1]) <= 1e-12
    assert abs(sch.abar[0] - 1.0) <= 1e-3
    assert np.all(np.diff(sch.abar) <= 0)


def test_schedule_errors_and_readonly():
    with pytest.raises(ValueError):
        build_schedule(0)
    with pytest.raises(ValueError):
        build_schedule(10, s=0.2)
    with pytest.raises(ValueError):
        build_schedule(10).abar[3] = 0.5


def test_kernel_limits():
    m = np.array([0.2, 0.5, 0.3])
    assert np.array_equal(marginal_kernel(1.0, m), np.eye(3))
    assert np.allclose(marginal_kernel(0.0, m), np.tile(m, (3, 1)), atol=0)


def test_kernel_errors():
    sch = build_schedule(8)
    mg = Marginals(np.array([0.5, 0.5]), np.array([0.9, 0.1]))
    with pytest.raises(ValueError):
        kernel_at(sch, mg, 0)
    with pytest.raises(ValueError):
        kernel_at(sch, mg, 9)


def test_step_kernel_degenerate_ratio():
    sch = DiffusionSchedule(T=3, s=0.008, abar=np.array([1.0, 0.5, 0.0, 0.0]))
    mg = Marginals(np.array([0.5, 0.5]), np.array([0.5, 0.5]))
    assert kernel_at(sch, mg, 2, "step").QX[0, 0] == pytest.approx(0.5)
    with pytest.raises(ZeroDivisionError):
        kernel_at(sch, mg, 3, "step")


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 16), st.integers(1, 5), st.integers(0, 10_000))
def test_kernel_rows_fixed_point_and_semigroup(T, k, seed):
    rng = np.random.default_rng(seed)
    sch = build_schedule(T)
    mg = Marginals(random_simplex(rng, k), random_simplex(rng, 2))
    prod = np.eye(k)
    for t in range(1, T + 1):
        for level in ("cumulative", "step"):
            q = kernel_at(sch, mg, t, level).QX
            assert np.allclose(q.sum(1), 1.0, atol=1e-9, rtol=0)
            assert np.all(q >= 0)
            assert np.allclose(mg.mX @ q, mg.mX, atol=1e-9, rtol=0)
        prod = prod @ kernel_at(sch, mg, t, "step").QX
        assert np.allclose(prod, kernel_at(sch, mg, t, "cumulative").QX, atol=1e-8, rtol=0)
        # the step kernel also matches the independent oracle construction
        assert np.allclose(kernel_at(sch, mg, t, "step").QX, step_kernel(t, T, list(mg.mX)), atol=1e-12)


def test_posterior_matches_exhaustive_bayes_all_small_instances():
    rng = np.random.default_rng(0)
    checked = 0
    for k in (2, 3, 4):
        for T in range(1, 9):
            mx = random_simplex(rng, k)
            mg = Marginals(mx, np.array([0.5, 0.5]))
            sch = build_schedule(T)
            for t in range(1, T + 1):
                p_hats = [random_simplex(rng, k), np.eye(k)[rng.integers(k)]]
                for p_hat in p_hats:
                    for b in range(k):
                        px, _ = posterior_step(p_hat[None], np.full((1, 1, 2), 0.5), np.array([b]),
                                               np.zeros((1, 1), dtype=int), t, sch, mg)
                        want = bayes_posterior(p_hat, b, t, T, list(mx))
                        assert np.allclose(px[0], want, atol=1e-9, rtol=0), (k, T, t, b)
                        checked += 1
    assert checked > 500


def test_posterior_two_category_toy():
    mg = Marginals(np.array([0.5, 0.5]), np.array([0.5, 0.5]))
    sch = build_schedule(4)
    px, _ = posterior_step(np.array([[1.0, 0.0]]), np.full((1, 1, 2), 0.5), np.array([1]),
                           np.zeros((1, 1), dtype=int), 2, sch, mg)
    assert np.allclose(px[0], bayes_posterior(np.array([1.0, 0.0]), 1, 2, 4, [0.5, 0.5]), atol=1e-12)


def test_posterior_endpoints():
    rng = np.random.default_rng(1)
    mg = Marginals(random_simplex(rng, 4), random_simplex(rng, 3))
    sch = build_schedule(10)
    x_t = np.array([2, 0, 3])
    e_t = np.zeros((3, 3), dtype=int)
    e_t[0, 1] = 2
    px, pe = posterior_step(np.eye(4)[[1, 1, 3]], np.broadcast_to(np.eye(3)[1], (3, 3, 3)), x_t, e_t, 1,
                            sch, mg)
    assert np.array_equal(px, np.eye(4)[[1, 1, 3]])
    assert np.array_equal(pe[0, 1], np.eye(3)[1])
    assert np.array_equal(pe[1, 0], np.eye(3)[0])

    # uniform predictions and uniform marginals at abar=0 give a uniform posterior
    uni = Marginals(np.full(4, 0.25), np.full(2, 0.5))
    sch = build_schedule(6)
    t = 6
    assert abs(sch.cumulative_alpha(t)) < 1e-12
    px, _ = posterior_step(np.full((2, 4), 0.25), np.full((2, 2, 2), 0.5), np.array([0, 3]),
                           np.zeros((2, 2), dtype=int), t, sch, uni)
    assert np.allclose(px, 0.25, atol=1e-12)


def test_posterior_rows_normalized_and_batched():
    rng = np.random.default_rng(2)
    mg = Marginals(random_simplex(rng, 5), random_simplex(rng, 2))
    sch = build_schedule(20)
    pX = random_simplex(rng, (3, 6, 5))
    pE = random_simplex(rng, (3, 6, 6, 2))
    x_t = rng.integers(0, 5, (3, 6))
    e_t = np.triu(rng.integers(0, 2, (3, 6, 6)), 1)
    px, pe = posterior_step(pX, pE, x_t, e_t, 7, sch, mg)
    assert np.allclose(px.sum(-1), 1, atol=1e-9) and np.allclose(pe.sum(-1), 1, atol=1e-9)
    single, _ = posterior_step(pX[1], pE[1], x_t[1], e_t[1], 7, sch, mg)
    assert np.allclose(single, px[1], atol=1e-14)


def test_impossible_transition_raises():
    # category 1 has no marginal mass, so a clean 0 can never be observed as 1
    mg = Marginals(np.array([1.0, 0.0]), np.array([0.5, 0.5]))
    sch = build_schedule(3)
    with pytest.raises(ImpossibleTransitionError, match=r"index \(0,\), t=2"):
        posterior_step(np.array([[1.0, 0.0]]), np.full((1, 1, 2), 0.5), np.array([1]),
                       np.zeros((1, 1), dtype=int), 2, sch, mg)


def test_forward_marginal_at_T_matches_mx():
    rng = np.random.default_rng(5)
    mg = Marginals(np.array([0.1, 0.2, 0.3, 0.15, 0.25]), np.array([0.7, 0.3]))
    sch = build_schedule(16)
    node = np.eye(5)[[0, 3]]
    edge = np.eye(2)[np.zeros((2, 2), dtype=int)]
    draws = np.array([apply_noise(node, edge, 16, sch, mg, rng)[0][0] for _ in range(10_000)])
    emp = np.bincount(draws, minlength=5) / draws.size
    assert tv(emp, mg.mX) <= 0.02


def test_forward_marginal_intermediate_t():
    rng = np.random.default_rng(6)
    mg = Marginals(np.array([0.25, 0.25, 0.5]), np.array([0.6, 0.4]))
    sch = build_schedule(16)
    t = 6
    probs = np.broadcast_to(np.eye(3)[2] @ kernel_at(sch, mg, t).QX, (10_000, 3))
    emp = np.bincount(sample_categorical(probs, rng), minlength=3) / 10_000
    assert tv(emp, np.eye(3)[2] @ kernel_at(sch, mg, t).QX) <= 0.02


def test_noise_keeps_lower_triangle_and_identity_at_t0(desk):
    rng = np.random.default_rng(7)
    cells = list(enumerate_space(desk))
    mg = Marginals.from_cells(cells, desk)
    sch = build_schedule(50)
    for cell in cells[:100]:
        node, edge = encode_onehot(cell, desk)
        _, e = apply_noise(node, edge, int(rng.integers(1, 51)), sch, mg, rng)
        assert np.array_equal(np.tril(e), np.tril(np.asarray(cell.e)))
    # fine schedule: first step keeps nearly everything
    agree = 0
    for cell in cells:
        node, edge = encode_onehot(cell, desk)
        x, _ = apply_noise(node, edge, 1, sch, mg, rng)
        agree += np.sum(x == np.asarray(cell.x))
    assert agree / (len(cells) * desk.n_nodes) >= sch.cumulative_alpha(1) - 0.01


def test_marginals_from_cells_match_direct_count(desk):
    cells = list(enumerate_space(desk))[:40] + [CellGraph.from_edges([0, 1, 1, 1, 1, 4], [(0, 1), (1, 5)])]
    mg = Marginals.from_cells(cells, desk)
    node_counts = np.zeros(desk.n_ops)
    edge_counts = np.zeros(2)
    for c in cells:
        for v in c.x:
            node_counts[v] += 1
        for i in range(desk.n_nodes):
            for j in range(i + 1, desk.n_nodes):
                edge_counts[c.e[i][j]] += 1
    assert np.allclose(mg.mX, node_counts / node_counts.sum(), atol=1e-12)
    assert np.allclose(mg.mE, edge_counts / edge_counts.sum(), atol=1e-12)
    back = Marginals.from_json(mg.to_json())
    assert np.array_equal(back.mX, mg.mX) and np.array_equal(back.mE, mg.mE)
