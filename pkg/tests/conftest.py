import numpy as np
import pytest
from hypothesis import strategies as st

from celldiff.cellgraph import INPUT, OUTPUT, CellGraph, EnumerationTemplate, SearchSpaceSpec
from celldiff.conditioning import ConditionEntry, ConditionSchema
from celldiff.denoiser import Denoiser, DenoiserConfig
from celldiff.spaces import get_space


def chain_space(n_nodes=3, ops=("conv",), **kw) -> SearchSpaceSpec:
    skeleton = tuple((i, i + 1, 1) for i in range(n_nodes - 1))
    slots = tuple((node, tuple(ops)) for node in range(1, n_nodes - 1))
    return SearchSpaceSpec(name="chain", n_nodes=n_nodes, op_vocab=(INPUT, *ops, OUTPUT),
                           template=EnumerationTemplate((skeleton,), slots), **kw)


@pytest.fixture
def desk():
    return get_space("desk")


@pytest.fixture
def tiny_schema():
    return ConditionSchema((ConditionEntry("acc", "val_acc", (60.0,)),
                            ConditionEntry("lat", "latency", (1.0, 2.0), "lower")))


@pytest.fixture
def tiny_model(desk, tiny_schema):
    cfg = DenoiserConfig(n_layers=2, hidden_dim=16, n_heads=2)
    return Denoiser(cfg, desk.n_ops, desk.n_edge_types, tiny_schema.class_counts, T=10, seed=3)


def upper_cells(n_nodes: int, n_ops: int):
    """Hypothesis strategy for arbitrary strictly-upper-triangular cells."""
    iu = np.triu_indices(n_nodes, 1)
    n_upper = len(iu[0])

    def build(ops, bits):
        e = np.zeros((n_nodes, n_nodes), dtype=int)
        e[iu] = bits
        return CellGraph.from_arrays(ops, e)

    return st.builds(build, st.lists(st.integers(0, n_ops - 1), min_size=n_nodes, max_size=n_nodes),
                     st.lists(st.integers(0, 1), min_size=n_upper, max_size=n_upper))


def random_simplex(rng, shape):
    p = rng.random(shape) + 1e-3
    return p / p.sum(-1, keepdims=True)


DESK_CONDITIONS = [{"name": "acc", "metric": "val_acc", "percentiles": [80]},
                   {"name": "lat", "metric": "latency_edgegpu", "direction": "lower", "percentiles": [50]}]


def desk_dataset():
    from celldiff.bench import synth_benchmark
    from celldiff.spaces import SYNTH_DEFAULTS
    d = SYNTH_DEFAULTS["desk"]
    table = synth_benchmark(get_space("desk"), d["weights"], d["depth_bonus"], 0, d["lat_table"])
    return table, table.dataset()


@pytest.fixture(scope="session")
def desk_run():
    """81-cell desk space, 100 epochs of the tiny config; shared by training and sampling tests."""
    from celldiff.training import TrainConfig, train_loop
    table, data = desk_dataset()
    cfg = TrainConfig(epochs=100, batch_size=16, learning_rate=1e-3, T=10, seed=0)
    state, manifest = train_loop(data, get_space("desk"), DESK_CONDITIONS, cfg,
                                 DenoiserConfig(n_layers=2, hidden_dim=16, n_heads=2))
    return state, manifest, table, data


ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
