"""Graph IR: fixture anchors, validation, topological order, liveness."""

import dataclasses

import numpy as np
import pytest

import oracles
from mcuq.errors import GraphValidationError
from mcuq.graph_ir import (
    ALL_KINDS,
    LayerSpec,
    NetworkGraph,
    liveness,
    load_graph,
    save_graph,
    topo_order,
    validate,
)


def replace_layer(g, layer_id, **kw):
    layers = tuple(
        dataclasses.replace(l, **kw) if l.id == layer_id else l for l in g.layers
    )
    return NetworkGraph(layers=layers, resolution=g.resolution,
                        width_multiplier=g.width_multiplier)


# ---------------------------------------------------------------------------
# Fixture anchors
# ---------------------------------------------------------------------------

def test_toy_fixture_shape(toy_graph):
    assert len(toy_graph.layers) == 8
    assert [l.kind for l in toy_graph.layers] == [
        "input", "conv2d", "conv2d", "conv2d", "conv2d",
        "avg_pool", "fully_connected", "output",
    ]
    assert sum(l.param_count for l in toy_graph.weighted_layers()) == 11300
    assert toy_graph.layer(4).output_shape == (32, 4, 4)
    assert toy_graph.layer(6).in_channels == 32
    assert toy_graph.layer(6).out_numel == 10


def test_mobilenet_fixture_counts(mobilenet_graph):
    g = mobilenet_graph
    assert len(g.layers) == 31
    assert g.resolution == 224
    assert sum(l.param_count for l in g.weighted_layers()) == 4209088
    assert sum(l.bias_count for l in g.weighted_layers()) == 33832
    kinds = {l.kind for l in g.layers}
    assert "depthwise_conv2d" in kinds and "pointwise_conv2d" in kinds


def test_residual_fixture_tensor_sets(residual_graph):
    g = residual_graph
    assert g.encoded_tensors() == [0, 1, 2, 3, 4, 5]
    assert g.decidable_act_tensors() == [0, 1, 2, 4, 5]
    assert g.residual_tensors() == {1, 2, 3}
    assert [l.id for l in g.consumers(1)] == [2, 3]


def test_toy_tensor_sets(toy_graph):
    assert toy_graph.encoded_tensors() == [0, 1, 2, 3, 4, 5]
    assert toy_graph.decidable_act_tensors() == [0, 1, 2, 3, 4, 5]
    assert toy_graph.residual_tensors() == set()
    # tensor 6 feeds only the output head, so it never gets an encoding
    assert 6 not in toy_graph.encoded_tensors()


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def test_duplicate_id_rejected(toy_graph):
    bad = tuple(toy_graph.layers[:-1]) + (
        dataclasses.replace(toy_graph.layers[-1], id=0),
    )
    with pytest.raises(GraphValidationError):
        validate(NetworkGraph(layers=bad, resolution=28, width_multiplier=1.0))


def test_unknown_kind_rejected(toy_graph):
    with pytest.raises(GraphValidationError):
        validate(replace_layer(toy_graph, 3, kind="maxpool"))


def test_dangling_input_rejected(toy_graph):
    with pytest.raises(GraphValidationError):
        validate(replace_layer(toy_graph, 3, input_ids=(99,)))


def test_param_count_mismatch_rejected(toy_graph):
    with pytest.raises(GraphValidationError):
        validate(replace_layer(toy_graph, 3, param_count=999))


def test_output_shape_mismatch_rejected(toy_graph):
    with pytest.raises(GraphValidationError):
        validate(replace_layer(toy_graph, 2, output_shape=(16, 9, 9)))


def test_residual_shape_mismatch_rejected(residual_graph):
    # make branch 1 wider than branch 2 at the add
    with pytest.raises(GraphValidationError):
        validate(replace_layer(residual_graph, 3, input_ids=(2, 0)))


def test_cycle_rejected(residual_graph):
    # 2 -> 3 -> 2 with agreeing shapes, so only topology can catch it
    with pytest.raises(GraphValidationError):
        validate(replace_layer(residual_graph, 2, input_ids=(3,)))


def test_error_carries_layer_id(toy_graph):
    with pytest.raises(GraphValidationError) as ei:
        validate(replace_layer(toy_graph, 3, param_count=999))
    assert "layer 3" in str(ei.value)


# ---------------------------------------------------------------------------
# Topological order and liveness
# ---------------------------------------------------------------------------

def test_topo_order_fixtures(toy_graph, residual_graph):
    assert topo_order(toy_graph) == list(range(8))
    assert topo_order(residual_graph) == list(range(8))


def test_topo_order_random_graphs():
    rng = np.random.default_rng(7)
    for _ in range(100):
        g = oracles.random_graph(rng)
        order = topo_order(g)
        assert sorted(order) == sorted(l.id for l in g.layers)
        seen = set()
        for lid in order:
            assert all(t in seen for t in g.layer(lid).input_ids)
            seen.add(lid)


def test_liveness_matches_simulation():
    rng = np.random.default_rng(11)
    for _ in range(60):
        g = oracles.random_graph(rng)
        assert liveness(g) == oracles.sim_liveness(g)


def test_liveness_residual_overlap(residual_graph):
    live = liveness(residual_graph)
    # tensor 1 stays live across the second conv because the add still needs it
    step_of = {lid: i for i, lid in enumerate(topo_order(residual_graph))}
    assert 1 in live[step_of[2]]
    assert {2, 1} <= live[step_of[3]]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def test_json_roundtrip(tmp_path, residual_graph):
    p = tmp_path / "g.json"
    save_graph(residual_graph, str(p))
    back = load_graph(str(p))
    assert back.layers == residual_graph.layers
    assert back.resolution == residual_graph.resolution
    assert back.width_multiplier == residual_graph.width_multiplier


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"layers": "nope"}')
    with pytest.raises((GraphValidationError, ValueError, TypeError, KeyError)):
        load_graph(str(p))


def test_kind_tuple_is_frozen():
    # the observation one-hot depends on this exact order
    assert ALL_KINDS == (
        "conv2d", "depthwise_conv2d", "pointwise_conv2d", "fully_connected",
        "add_residual", "avg_pool", "relu_clip", "input", "output",
    )
