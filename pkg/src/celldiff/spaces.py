"""Built-in search-space presets.

``nb101`` and ``nb201`` describe the structure of the public tabular
benchmarks (no data is bundled). ``desk`` and ``desk-layered`` are small
enumerable spaces used with the synthetic benchmark.
"""

from __future__ import annotations

from .cellgraph import INPUT, OUTPUT, EnumerationTemplate, SearchSpaceSpec

NB101_OPS = ("conv1x1-bn-relu", "conv3x3-bn-relu", "maxpool3x3")
NB201_OPS = ("nor_conv_1x1", "nor_conv_3x3", "avg_pool_3x3", "skip_connect", "none")
DESK_OPS = ("conv1x1", "conv3x3", "maxpool3x3")
LAYERED_OPS = ("conv1x1", "conv3x3", "maxpool3x3", "avgpool3x3")
LAYERED_SHAPES = ((1, 1, 1, 1, 1), (1, 3, 1), (5,))

# Node-based form of the 4-node/6-edge cell: every original edge becomes an
# op node (1..6), node 0 is the cell input and node 7 the output.
NB201_SKELETON = (
    (0, 1, 1), (0, 2, 1), (0, 4, 1),
    (1, 3, 1), (1, 5, 1),
    (2, 6, 1), (3, 6, 1),
    (4, 7, 1), (5, 7, 1), (6, 7, 1),
)


def _layered_skeleton(layers: tuple[int, ...]) -> tuple[tuple[int, int, int], ...]:
    """Fully connect consecutive layers of intermediate nodes between INPUT and OUTPUT."""
    groups = [[0]]
    nxt = 1
    for size in layers:
        groups.append(list(range(nxt, nxt + size)))
        nxt += size
    groups.append([nxt])
    return tuple((i, j, 1) for a, b in zip(groups, groups[1:]) for i in a for j in b)


def nb101() -> SearchSpaceSpec:
    return SearchSpaceSpec(
        name="nb101", n_nodes=7, op_vocab=(INPUT, *NB101_OPS, OUTPUT), max_edges=9)


def nb201() -> SearchSpaceSpec:
    slots = tuple((node, NB201_OPS) for node in range(1, 7))
    return SearchSpaceSpec(
        name="nb201", n_nodes=8, op_vocab=(INPUT, *NB201_OPS, OUTPUT),
        template=EnumerationTemplate(skeletons=(NB201_SKELETON,), slots=slots))


def desk() -> SearchSpaceSpec:
    """81 cells: fixed diamond-with-chain skeleton, 4 slots x 3 ops."""
    skeleton = ((0, 1, 1), (0, 2, 1), (1, 3, 1), (2, 3, 1), (3, 4, 1), (4, 5, 1))
    slots = tuple((node, DESK_OPS) for node in range(1, 5))
    return SearchSpaceSpec(
        name="desk", n_nodes=6, op_vocab=(INPUT, *DESK_OPS, OUTPUT),
        template=EnumerationTemplate(skeletons=(skeleton,), slots=slots))


def desk_layered() -> SearchSpaceSpec:
    """3,072 cells: chain, 1-3-1 and single-layer skeletons over 5 intermediate nodes, 4 ops each.

    The skeletons have INPUT->OUTPUT depths 6, 4 and 2, so accuracy depends on
    structure as well as on the op mix.
    """
    skeletons = tuple(_layered_skeleton(c) for c in LAYERED_SHAPES)
    slots = tuple((node, LAYERED_OPS) for node in range(1, 6))
    return SearchSpaceSpec(
        name="desk-layered", n_nodes=7, op_vocab=(INPUT, *LAYERED_OPS, OUTPUT),
        template=EnumerationTemplate(skeletons=skeletons, slots=slots))


PRESETS = {
    "nb101": nb101,
    "nb201": nb201,
    "desk": desk,
    "desk-layered": desk_layered,
}

# Synthetic-benchmark defaults: accuracy bonus per op and per-device latency (ms).
SYNTH_DEFAULTS = {
    "desk": {
        "weights": {"conv1x1": 1.0, "conv3x3": 2.5, "maxpool3x3": 0.0},
        "depth_bonus": 1.0,
        "lat_table": {"edgegpu": {"conv1x1": 0.3, "conv3x3": 0.9, "maxpool3x3": 0.1}},
    },
    "desk-layered": {
        "weights": {"conv1x1": 1.0, "conv3x3": 2.0, "maxpool3x3": 0.0, "avgpool3x3": 0.5},
        "depth_bonus": 1.5,
        "lat_table": {"edgegpu": {"conv1x1": 0.3, "conv3x3": 0.9, "maxpool3x3": 0.1, "avgpool3x3": 0.15}},
    },
    "nb201": {
        "weights": {"nor_conv_1x1": 1.0, "nor_conv_3x3": 2.0, "avg_pool_3x3": 0.2,
                    "skip_connect": 0.5, "none": -1.0},
        "depth_bonus": 0.0,
        "lat_table": {"edgegpu": {"nor_conv_1x1": 0.3, "nor_conv_3x3": 0.9, "avg_pool_3x3": 0.2,
                                  "skip_connect": 0.01, "none": 0.005}},
    },
}


def get_space(name: str) -> SearchSpaceSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown space {name!r}; known: {sorted(PRESETS)}") from None
